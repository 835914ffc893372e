"""One-vs-rest L2-regularised logistic regression that seeds the score matrix.

Each seen class ``k`` gets its own weight vector minimising::

    0.5 * ||w||^2 + c * sum_i log(1 + exp(-z_i * w . [x_i, 1]))

with ``z_i = +1`` for rows of class ``k`` and ``-1`` otherwise. The bias is
the last weight and is regularised like the others.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError
from .propagation import ScoreMatrix

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-6
MAX_ITER = 10_000


@dataclass(frozen=True)
class FeatureDataset:
    image_ids: tuple
    features: np.ndarray = field(repr=False)
    labels: tuple | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim != 2:
            raise InvalidInputError(f"features must be a 2-D matrix, got shape {X.shape}")
        ids = tuple(self.image_ids)
        if len(ids) != X.shape[0]:
            raise InvalidInputError(f"{len(ids)} image ids for {X.shape[0]} feature rows")
        labels = self.labels
        if labels is not None:
            labels = tuple(labels)
            if len(labels) != X.shape[0]:
                raise InvalidInputError(f"{len(labels)} labels for {X.shape[0]} feature rows")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "image_ids", ids)
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.features.shape[0]

    def subset(self, mask) -> "FeatureDataset":
        mask = np.asarray(mask, dtype=bool)
        ids = tuple(i for i, m in zip(self.image_ids, mask) if m)
        labels = None if self.labels is None else tuple(l for l, m in zip(self.labels, mask) if m)
        return FeatureDataset(ids, self.features[mask], labels)


@dataclass(frozen=True)
class LogRegModel:
    weights: np.ndarray = field(repr=False)
    c: float
    class_order: tuple
    grad_norms: tuple = ()
    iterations: tuple = ()

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1] - 1

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.class_order),
            "c": self.c,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LogRegModel":
        return cls(weights=np.asarray(doc["weights"], dtype=float), c=float(doc["c"]),
                   class_order=tuple(doc["class_order"]))


def augment(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.hstack([X, np.ones((X.shape[0], 1))])


def objective(w, Xa, z, c) -> float:
    """Regularised logistic objective of one binary problem (bias-augmented ``Xa``)."""
    margins = z * (Xa @ w)
    return 0.5 * float(w @ w) + c * float(np.sum(np.logaddexp(0.0, -margins)))


def gradient(w, Xa, z, c) -> np.ndarray:
    margins = z * (Xa @ w)
    return w - c * (Xa.T @ (z * expit(-margins)))


def _fit_binary(Xa, z, c, tol=GRAD_TOL, max_iter=MAX_ITER):
    """Gradient descent with Armijo backtracking, step size carried across iterations."""
    w = np.zeros(Xa.shape[1])
    f = objective(w, Xa, z, c)
    g = gradient(w, Xa, z, c)
    gnorm = float(np.linalg.norm(g))
    # 1/L with L an upper bound on the Hessian's largest eigenvalue
    lip = 1.0 + 0.25 * c * float(np.linalg.norm(Xa, 2) ** 2)
    step = 1.0 / lip
    it = 0
    while gnorm > tol and it < max_iter:
        it += 1
        t = min(step * 2.0, 1.0)
        while True:
            w_new = w - t * g
            f_new = objective(w_new, Xa, z, c)
            if f_new <= f - 0.5 * t * gnorm ** 2 or t < 1e-16:
                break
            t *= 0.5
        step = t
        w, f = w_new, f_new
        g = gradient(w, Xa, z, c)
        gnorm = float(np.linalg.norm(g))
    return w, gnorm, it


def train_logreg(train: FeatureDataset, c: float = 0.01,
                 class_order: Sequence | None = None) -> LogRegModel:
    """Fit one binary classifier per seen class.

    ``class_order`` fixes the row order of the weight matrix and must cover
    every training label; it defaults to labels in order of first appearance.
    """
    if train.labels is None:
        raise InvalidInputError("training dataset has no labels")
    if not c > 0:
        raise InvalidInputError(f"c must be positive, got {c}")
    X = train.features
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("training features contain non-finite values")
    labels = np.asarray(train.labels, dtype=object)
    if class_order is None:
        class_order = tuple(dict.fromkeys(train.labels))
    class_order = tuple(class_order)
    unknown = set(train.labels) - set(class_order)
    if unknown:
        raise InvalidInputError(f"training labels {sorted(map(str, unknown))[:5]} are not in the class order")
    if len(class_order) < 2:
        raise InvalidInputError("at least two seen classes are required")
    Xa = augment(X)
    weights, norms, iters = [], [], []
    for k in class_order:
        pos = labels == k
        if not pos.any():
            raise InvalidInputError(f"seen class {k!r} has no training rows")
        z = np.where(pos, 1.0, -1.0)
        w, gnorm, it = _fit_binary(Xa, z, c)
        if gnorm > GRAD_TOL:
            logger.warning("class %r: gradient norm %.3e after %d iterations", k, gnorm, it)
        weights.append(w)
        norms.append(gnorm)
        iters.append(it)
    return LogRegModel(weights=np.vstack(weights), c=float(c), class_order=class_order,
                       grad_norms=tuple(norms), iterations=tuple(iters))


def predict_proba_matrix(model: LogRegModel, X) -> np.ndarray:
    """Row-wise normalised one-vs-rest sigmoids for a batch of feature rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise InvalidInputError(f"feature dimension {X.shape[1]} != model dimension {model.dim}")
    s = augment(X) @ model.weights.T
    # normalising sigmoids == softmax over log-sigmoids, which cannot underflow to 0/0
    logsig = -np.logaddexp(0.0, -s)
    logsig -= logsig.max(axis=1, keepdims=True)
    e = np.exp(logsig)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(model: LogRegModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a single feature vector, got shape {x.shape}")
    return predict_proba_matrix(model, x[None, :])[0]


def seed_matrix(test: FeatureDataset, model: LogRegModel, unseen_ids: Sequence) -> ScoreMatrix:
    """Seed scores: seen-class probabilities followed by zero unseen columns."""
    unseen_ids = tuple(unseen_ids)
    p, q = model.n_classes, len(unseen_ids)
    values = np.zeros((len(test), p + q))
    if len(test):
        values[:, :p] = predict_proba_matrix(model, test.features)
    return ScoreMatrix(values, test.image_ids, model.class_order + unseen_ids, p)
