"""Semantic directed graph over seen and unseen classes.

Seen classes point to their nearest seen and unseen neighbours in semantic
space with weight ``exp(-distance)``; every unseen class carries a single
self-loop of weight one. The resulting weight matrix has the block form::

    W = [[R1, R2],
         [ 0,  I]]
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

ClassId = Hashable


@dataclass(frozen=True)
class SemanticSpace:
    """Seen/unseen class partition together with one semantic vector per class.

    ``vectors`` may be given as a mapping from class id to vector; it is
    stored as a dense ``(p + q, d)`` matrix in ``class_order``.
    """

    seen_ids: tuple
    unseen_ids: tuple
    matrix: np.ndarray = field(repr=False)

    def __init__(self, seen_ids: Sequence[ClassId], unseen_ids: Sequence[ClassId],
                 vectors: Mapping[ClassId, Sequence[float]]):
        seen_ids = tuple(seen_ids)
        unseen_ids = tuple(unseen_ids)
        if len(seen_ids) < 1 or len(unseen_ids) < 1:
            raise InvalidInputError(
                f"need at least one seen and one unseen class, got p={len(seen_ids)}, q={len(unseen_ids)}")
        order = seen_ids + unseen_ids
        if len(set(order)) != len(order):
            overlap = set(seen_ids) & set(unseen_ids)
            if overlap:
                raise InvalidInputError(f"seen and unseen classes overlap: {sorted(map(str, overlap))}")
            raise InvalidInputError("duplicate class identifiers in seen/unseen lists")
        missing = [c for c in order if c not in vectors]
        if missing:
            raise InvalidInputError(f"no semantic vector for classes {missing[:5]}")
        rows = [np.asarray(vectors[c], dtype=float).ravel() for c in order]
        dims = {r.shape[0] for r in rows}
        if len(dims) != 1:
            raise InvalidInputError(f"semantic vectors have inconsistent dimensions {sorted(dims)}")
        mat = np.vstack(rows)
        if not np.all(np.isfinite(mat)):
            raise InvalidInputError("semantic vectors contain non-finite values")
        mat.setflags(write=False)
        object.__setattr__(self, "seen_ids", seen_ids)
        object.__setattr__(self, "unseen_ids", unseen_ids)
        object.__setattr__(self, "matrix", mat)

    @property
    def p(self) -> int:
        return len(self.seen_ids)

    @property
    def q(self) -> int:
        return len(self.unseen_ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def class_order(self) -> tuple:
        return self.seen_ids + self.unseen_ids

    def index_of(self, class_id: ClassId) -> int:
        try:
            return self.class_order.index(class_id)
        except ValueError:
            raise InvalidInputError(f"unknown class id {class_id!r}") from None

    def vector(self, class_id: ClassId) -> np.ndarray:
        return self.matrix[self.index_of(class_id)]

    def zscored(self) -> "SemanticSpace":
        """Return a copy with every dimension standardised over all classes.

        Constant dimensions are centred but left unscaled.
        """
        mat = self.matrix
        std = mat.std(axis=0)
        std[std == 0] = 1.0
        z = (mat - mat.mean(axis=0)) / std
        return SemanticSpace(self.seen_ids, self.unseen_ids, dict(zip(self.class_order, z)))


@dataclass(frozen=True)
class ClassGraph:
    weight_matrix: np.ndarray = field(repr=False)
    k1: int
    k2: int
    class_order: tuple
    p: int
    q: int

    @property
    def seen_ids(self) -> tuple:
        return self.class_order[: self.p]

    @property
    def unseen_ids(self) -> tuple:
        return self.class_order[self.p:]


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def edge_weight(dist: float) -> float:
    """Edge weight for a pair of classes at Euclidean distance ``dist``."""
    if not dist >= 0:
        raise InvalidInputError(f"distance must be nonnegative, got {dist}")
    return math.exp(-dist)


def _ranked(query: np.ndarray, cand_vectors: np.ndarray, cand_index: np.ndarray):
    dists = np.sqrt(np.sum((cand_vectors - query) ** 2, axis=1))
    # primary key distance, secondary key class-order index
    order = np.lexsort((cand_index, dists))
    return order, dists


def knn_neighbors(query_id: ClassId, candidates: Sequence[ClassId], k: int,
                  space: SemanticSpace) -> list:
    """The ``k`` candidates closest to ``query_id``, query itself excluded.

    Ties in distance are resolved by position in ``space.class_order``.
    """
    pool = [c for c in candidates if c != query_id]
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise InvalidInputError(f"k must be a positive integer, got {k!r}")
    if k > len(pool):
        raise InvalidInputError(
            f"k={k} exceeds the number of available candidates ({len(pool)})")
    q = space.vector(query_id)
    idx = np.array([space.index_of(c) for c in pool])
    order, _ = _ranked(q, space.matrix[idx], idx)
    return [pool[i] for i in order[:k]]


def build_weight_matrix(space: SemanticSpace, k1: int, k2: int) -> ClassGraph:
    """Assemble the directed class graph for ``space``.

    Parameters
    ----------
    space : SemanticSpace
    k1 : int
        Seen neighbours per seen class; must be at most ``p - 1``.
    k2 : int
        Unseen neighbours per seen class; must be at most ``q``.
    """
    p, q = space.p, space.q
    if not (isinstance(k1, (int, np.integer)) and isinstance(k2, (int, np.integer))):
        raise InvalidInputError(f"k1 and k2 must be integers, got {k1!r}, {k2!r}")
    if k1 < 1 or k1 >= p:
        raise InvalidInputError(f"k1={k1} must satisfy 1 <= k1 <= p-1 = {p - 1}")
    if k2 < 1 or k2 > q:
        raise InvalidInputError(f"k2={k2} must satisfy 1 <= k2 <= q = {q}")

    vecs = space.matrix
    n = p + q
    W = np.zeros((n, n))
    seen_idx = np.arange(p)
    unseen_idx = np.arange(p, n)
    n_dup = 0
    for s in range(p):
        others = seen_idx[seen_idx != s]
        order, d = _ranked(vecs[s], vecs[others], others)
        chosen = order[:k1]
        W[s, others[chosen]] = np.exp(-d[chosen])
        n_dup += int(np.sum(d[chosen] == 0))

        order, d = _ranked(vecs[s], vecs[unseen_idx], unseen_idx)
        chosen = order[:k2]
        W[s, unseen_idx[chosen]] = np.exp(-d[chosen])
        n_dup += int(np.sum(d[chosen] == 0))
    W[p:, p:] = np.eye(q)
    if n_dup:
        logger.warning("%d graph edges join classes with identical semantic vectors", n_dup)
    W.setflags(write=False)
    return ClassGraph(weight_matrix=W, k1=int(k1), k2=int(k2),
                      class_order=space.class_order, p=p, q=q)
