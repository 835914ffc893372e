"""Exception hierarchy shared by every stage of the pipeline."""


class ZSLError(Exception):
    """Base class for all errors raised by zslprop."""


class InvalidInputError(ZSLError, ValueError):
    """An argument violates an operation's precondition."""


class MalformedGraphError(ZSLError):
    """A class graph cannot be turned into a Markov operator."""


class ConvergenceError(ZSLError):
    """An iterative routine hit its iteration cap.

    The final residual is kept on the exception so callers can report it.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class IllConditionedError(ZSLError):
    """The propagation system is singular or too badly conditioned to solve."""

    def __init__(self, message, alpha=None, spectral_radius=None, condition=None):
        super().__init__(message)
        self.alpha = alpha
        self.spectral_radius = spectral_radius
        self.condition = condition


class NonFiniteError(ZSLError, FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class StageError(ZSLError):
    """Wraps an error raised inside the pipeline with fold and stage context."""

    def __init__(self, stage, fold, cause):
        self.stage = stage
        self.fold = fold
        self.cause = cause
        where = f"stage={stage}" if fold is None else f"fold={fold} stage={stage}"
        super().__init__(f"[{where}] {type(cause).__name__}: {cause}")
