"""Label propagation over the class graph.

The graph is turned into a row-stochastic transition matrix, mixed with a
small uniform off-diagonal jump, symmetrised into a smoothing operator
``Theta`` and finally used to spread per-image seed scores::

    Y_tilde = Y (I - alpha * Theta)^-1
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, IllConditionedError, InvalidInputError, MalformedGraphError
from .semantic_graph import ClassGraph

logger = logging.getLogger(__name__)

PI_MODES = ("literal", "stationary")
ARGMAX_MODES = ("unseen", "all")

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-image scores over ``class_order``; the first ``n_seen`` columns are seen classes."""

    values: np.ndarray = field(repr=False)
    image_ids: tuple
    class_order: tuple
    n_seen: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise InvalidInputError(f"score matrix must be 2-D, got shape {values.shape}")
        if values.shape != (len(self.image_ids), len(self.class_order)):
            raise InvalidInputError(
                f"score matrix shape {values.shape} does not match "
                f"{len(self.image_ids)} images x {len(self.class_order)} classes")
        if not 0 <= self.n_seen <= len(self.class_order):
            raise InvalidInputError(f"n_seen={self.n_seen} out of range")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(self, "class_order", tuple(self.class_order))

    @property
    def seen_ids(self) -> tuple:
        return self.class_order[: self.n_seen]

    @property
    def unseen_ids(self) -> tuple:
        return self.class_order[self.n_seen:]

    def with_values(self, values) -> "ScoreMatrix":
        return ScoreMatrix(values, self.image_ids, self.class_order, self.n_seen)


@dataclass(frozen=True)
class PropagationOperator:
    P: np.ndarray = field(repr=False)
    pi: np.ndarray = field(repr=False)
    Theta: np.ndarray = field(repr=False)
    alpha: float
    eta: float
    class_order: tuple = ()
    n_seen: int = 0
    pi_mode: str = "literal"

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in [0, 1), got {self.alpha}")
        for name in ("P", "pi", "Theta"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.P.shape[0]

    def diagnostics(self) -> dict:
        n = self.size
        row_err = float(np.max(np.abs(self.P.sum(axis=1) - 1.0)))
        rho = spectral_radius(self.Theta)
        system = np.eye(n) - self.alpha * self.Theta
        # Theta is symmetric, so the smoothing objective has a minimiser iff this is positive
        min_eig = float(np.linalg.eigvalsh(system).min())
        return {
            "n_classes": n,
            "n_seen": self.n_seen,
            "alpha": self.alpha,
            "eta": self.eta,
            "pi_mode": self.pi_mode,
            "row_sum_error": row_err,
            "theta_spectral_radius": rho,
            "alpha_spectral_radius": self.alpha * rho,
            "system_min_eigenvalue": min_eig,
            "system_positive_definite": min_eig > 0,
            "theta_symmetric": bool(np.array_equal(self.Theta, self.Theta.T)),
            "condition_estimate": float(np.linalg.cond(system)),
        }


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float)))))


def transition_matrix(graph: ClassGraph) -> np.ndarray:
    """Row-normalise the graph's weight matrix into a Markov transition matrix."""
    W = np.asarray(graph.weight_matrix, dtype=float)
    sums = W.sum(axis=1)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        cid = graph.class_order[bad[0]] if graph.class_order else bad[0]
        raise MalformedGraphError(f"class {cid!r} has zero outgoing weight")
    return W / sums[:, None]


def normalize_transition(T, eta: float) -> np.ndarray:
    """Mix ``T`` with a uniform jump to every other class, weighted by ``eta``."""
    T = np.asarray(T, dtype=float)
    if not 0 <= eta < 1:
        raise InvalidInputError(f"eta must lie in [0, 1), got {eta}")
    n = T.shape[0]
    if T.ndim != 2 or T.shape[1] != n:
        raise InvalidInputError(f"transition matrix must be square, got {T.shape}")
    if eta == 0:
        return T.copy()
    if n < 2:
        raise InvalidInputError("teleport normalisation needs at least two classes")
    jump = (eta / (n - 1)) * (np.ones((n, n)) - np.eye(n))
    return jump + (1.0 - eta) * T


def row_mass(P, mode: str = "literal", tol: float = 1e-12, max_iter: int = 1_000_000) -> np.ndarray:
    """Per-class mass vector used to weight the smoothness term.

    ``literal`` returns the row sums of ``P``. ``stationary`` returns the
    stationary distribution ``pi P = pi`` by power iteration from the
    uniform vector, stopping once ``max|pi P - pi| <= tol``.
    """
    P = np.asarray(P, dtype=float)
    if mode == "literal":
        return P.sum(axis=1)
    if mode != "stationary":
        raise InvalidInputError(f"unknown pi mode {mode!r}; expected one of {PI_MODES}")
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    residual = np.inf
    for it in range(1, max_iter + 1):
        nxt = pi @ P
        nxt /= nxt.sum()
        residual = float(np.max(np.abs(nxt - pi)))
        pi = nxt
        if residual <= tol:
            return pi
    raise ConvergenceError(
        f"stationary distribution did not converge in {max_iter} iterations "
        f"(residual {residual:.3e})", residual=residual, iterations=max_iter)


def theta_operator(P, pi) -> np.ndarray:
    """Symmetrised smoothing operator ``(S P S^-1 + S^-1 P^T S) / 2`` with ``S = diag(sqrt(pi))``."""
    P = np.asarray(P, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(~(pi > 0)):
        raise InvalidInputError("all row masses must be strictly positive")
    s = np.sqrt(pi)
    A = s[:, None] * P / s[None, :]
    # A + A.T is bitwise symmetric
    return (A + A.T) / 2.0


def build_operator(graph: ClassGraph, eta: float = 0.001, alpha: float = 0.8,
                   pi_mode: str = "literal") -> PropagationOperator:
    T = transition_matrix(graph)
    P = normalize_transition(T, eta)
    pi = row_mass(P, pi_mode)
    Theta = theta_operator(P, pi)
    return PropagationOperator(P=P, pi=pi, Theta=Theta, alpha=float(alpha), eta=float(eta),
                               class_order=graph.class_order, n_seen=graph.p, pi_mode=pi_mode)


def _check_columns(Y: ScoreMatrix, op: PropagationOperator):
    if Y.values.shape[1] != op.size:
        raise InvalidInputError(
            f"score matrix has {Y.values.shape[1]} columns but operator has {op.size} classes")


def fixed_point_residual(Y_tilde, Y, op: PropagationOperator) -> float:
    """``max|Y_tilde - alpha Y_tilde Theta - Y|``."""
    return float(np.max(np.abs(Y_tilde - op.alpha * Y_tilde @ op.Theta - Y), initial=0.0))


def propagate_closed(Y: ScoreMatrix, op: PropagationOperator) -> ScoreMatrix:
    """Closed-form propagation via an LU solve of ``(I - alpha Theta)``.

    Raises IllConditionedError when the system's condition number exceeds 1e12.
    """
    _check_columns(Y, op)
    n = op.size
    A = np.eye(n) - op.alpha * op.Theta
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedError(
            f"I - alpha*Theta is ill-conditioned (cond={cond:.3e}, alpha={op.alpha}, "
            f"spectral radius of Theta={spectral_radius(op.Theta):.6f})",
            alpha=op.alpha, spectral_radius=spectral_radius(op.Theta), condition=cond)
    if Y.values.shape[0] == 0:
        return Y.with_values(Y.values.copy())
    # Y_tilde A = Y  <=>  A^T Y_tilde^T = Y^T
    lu = scipy.linalg.lu_factor(A.T, check_finite=True)
    out = scipy.linalg.lu_solve(lu, Y.values.T).T
    return Y.with_values(out)


@dataclass(frozen=True)
class IterativeResult:
    scores: ScoreMatrix
    converged: bool
    iterations: int
    last_delta: float


def propagate_iterative(Y: ScoreMatrix, op: PropagationOperator, tol: float = 1e-12,
                        max_iter: int = 100_000) -> IterativeResult:
    """Fixed-point iteration ``F <- alpha F Theta + Y`` started from ``F = Y``.

    Converges only when the spectral radius of ``alpha * Theta`` is below 1,
    which the stationary pi mode guarantees for any ``alpha < 1``. Does not
    raise on hitting ``max_iter`` or on divergence; the returned result
    carries ``converged=False`` and the last finite iterate instead.
    """
    _check_columns(Y, op)
    Yv = Y.values
    F = Yv.copy()
    delta = 0.0
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = op.alpha * (F @ op.Theta) + Yv
        delta = float(np.max(np.abs(nxt - F), initial=0.0))
        if not np.isfinite(delta):
            # diverging (spectral radius of alpha*Theta >= 1): keep the last finite iterate
            logger.warning("iterative propagation diverged after %d iterations", it)
            return IterativeResult(Y.with_values(F), False, it - 1, delta)
        F = nxt
        if delta <= tol:
            return IterativeResult(Y.with_values(F), True, it, delta)
    logger.warning("iterative propagation stopped after %d iterations (delta %.3e)", max_iter, delta)
    return IterativeResult(Y.with_values(F), False, max_iter, delta)


def predict_labels(scores: ScoreMatrix, restrict: str = "unseen") -> list:
    """Highest-scoring class per image; ties go to the earliest class in ``class_order``."""
    if restrict == "unseen":
        offset = scores.n_seen
        ids = scores.unseen_ids
    elif restrict == "all":
        offset = 0
        ids = scores.class_order
    else:
        raise InvalidInputError(f"unknown argmax mode {restrict!r}; expected one of {ARGMAX_MODES}")
    if not ids:
        raise InvalidInputError("no candidate classes to predict from")
    block = scores.values[:, offset:]
    # np.argmax returns the first maximal index
    return [ids[j] for j in np.argmax(block, axis=1)]


def tied_rows(scores: ScoreMatrix, restrict: str = "unseen") -> int:
    """Number of images whose maximal score is shared by more than one candidate class."""
    block = scores.values[:, scores.n_seen:] if restrict == "unseen" else scores.values
    if block.shape[0] == 0 or block.shape[1] == 0:
        return 0
    top = block.max(axis=1, keepdims=True)
    return int(np.sum((block == top).sum(axis=1) > 1))


def scores_from_array(values, image_ids: Sequence, class_order: Sequence, n_seen: int) -> ScoreMatrix:
    return ScoreMatrix(np.asarray(values, dtype=float), tuple(image_ids), tuple(class_order), int(n_seen))
