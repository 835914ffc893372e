import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import special_ortho_group

from zslprop.errors import InvalidInputError
from zslprop.semantic_graph import (SemanticSpace, build_weight_matrix, edge_weight,
                                    euclidean_distance, knn_neighbors)

from conftest import random_space
from oracles import brute_force_knn

E1 = 0.36787944117144232  # exp(-1), mpmath at 30 digits
E2 = 0.13533528323661269  # exp(-2)


@pytest.mark.parametrize("a, b, expected", [
    ([0, 0], [3, 4], 5.0),
    ([1, 1, 1], [1, 1, 1], 0.0),
    ([2], [0], 2.0),
])
def test_euclidean_distance(a, b, expected):
    assert euclidean_distance(a, b) == expected
    assert euclidean_distance(b, a) == expected


def test_euclidean_distance_dimension_mismatch():
    with pytest.raises(InvalidInputError):
        euclidean_distance([1, 2], [1, 2, 3])


def test_edge_weight_values():
    assert edge_weight(0.0) == 1.0
    assert edge_weight(math.log(2)) == pytest.approx(0.5, abs=1e-15)
    assert edge_weight(1.0) == pytest.approx(E1, rel=1e-12)


def test_edge_weight_rejects_negative():
    with pytest.raises(InvalidInputError):
        edge_weight(-0.1)


@given(st.floats(0, 50), st.floats(0, 50))
def test_edge_weight_strictly_decreasing(a, b):
    if a < b:
        assert edge_weight(a) >= edge_weight(b)
    assert 0 < edge_weight(a) <= 1


def _line_space(coords):
    ids = [f"c{i}" for i in range(len(coords))]
    return SemanticSpace(ids[:1], ids[1:], {i: v for i, v in zip(ids, coords)}), ids


def test_knn_on_a_line():
    space, ids = _line_space([[0], [1], [2], [3]])
    assert knn_neighbors("c0", ids[1:], 2, space) == ["c1", "c2"]


def test_knn_tie_goes_to_lower_index():
    space, ids = _line_space([[0], [1], [-1]])
    assert knn_neighbors("c0", ids[1:], 1, space) == ["c1"]
    space, ids = _line_space([[0], [-1], [1]])
    assert knn_neighbors("c0", ids[1:], 1, space) == ["c1"]


def test_knn_2d_matches_brute_force():
    coords = [[0, 0], [1, 0], [0, 2], [3, 3]]
    space, ids = _line_space(coords)
    expected = brute_force_knn(coords[0], list(enumerate(coords))[1:], 2)
    assert expected == [1, 2]
    assert knn_neighbors("c0", ids[1:], 2, space) == [ids[i] for i in expected]


def test_knn_excludes_query_and_rejects_large_k():
    space, ids = _line_space([[0], [1], [2]])
    assert "c0" not in knn_neighbors("c0", ids, 2, space)
    with pytest.raises(InvalidInputError, match=r"k=3 .*\(2\)"):
        knn_neighbors("c0", ids, 3, space)


def test_knn_agrees_with_brute_force_random(rng):
    space = random_space(rng, 8, 5, d=3)
    order = space.class_order
    for qi, query in enumerate(order):
        cands = [(i, space.matrix[i].tolist()) for i in range(len(order)) if i != qi]
        expected = brute_force_knn(space.matrix[qi].tolist(), cands, 4)
        assert knn_neighbors(query, order, 4, space) == [order[i] for i in expected]


def test_knn_is_deterministic(rng):
    space = random_space(rng, 10, 4)
    runs = {tuple(knn_neighbors("s3", space.class_order, 5, space)) for _ in range(5)}
    assert len(runs) == 1


def test_weight_matrix_worked_example(tiny_space):
    g = build_weight_matrix(tiny_space, 1, 1)
    expected = np.array([[0, E1, E2], [E1, 0, E1], [0, 0, 1]])
    np.testing.assert_allclose(g.weight_matrix, expected, rtol=1e-14, atol=0)
    assert g.class_order == ("s1", "s2", "u1")


def test_weight_matrix_rejects_bad_k(tiny_space):
    single = SemanticSpace(["s"], ["u"], {"s": [0.0], "u": [1.0]})
    with pytest.raises(InvalidInputError):
        build_weight_matrix(single, 1, 1)
    with pytest.raises(InvalidInputError):
        build_weight_matrix(tiny_space, 2, 1)
    with pytest.raises(InvalidInputError):
        build_weight_matrix(tiny_space, 1, 2)


def test_space_rejects_duplicates_and_overlap():
    with pytest.raises(InvalidInputError):
        SemanticSpace(["a", "a"], ["b"], {"a": [0], "b": [1]})
    with pytest.raises(InvalidInputError, match="overlap"):
        SemanticSpace(["a", "b"], ["b"], {"a": [0], "b": [1]})
    with pytest.raises(InvalidInputError):
        SemanticSpace(["a"], ["b"], {"a": [0, 1], "b": [1]})
    with pytest.raises(InvalidInputError):
        SemanticSpace(["a"], [], {"a": [0]})


def test_duplicate_vectors_warn(caplog):
    space = SemanticSpace(["a", "b"], ["c"], {"a": [0.0], "b": [0.0], "c": [1.0]})
    g = build_weight_matrix(space, 1, 1)
    assert g.weight_matrix[0, 1] == 1.0
    assert "identical semantic vectors" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 15), st.integers(1, 8), st.integers(0, 10_000))
def test_block_structure_and_sparsity(p, q, seed):
    rng = np.random.default_rng(seed)
    space = random_space(rng, p, q)
    k1 = int(rng.integers(1, p))
    k2 = int(rng.integers(1, q + 1))
    W = build_weight_matrix(space, k1, k2).weight_matrix
    assert np.array_equal(W[p:, :p], np.zeros((q, p)))
    assert np.array_equal(W[p:, p:], np.eye(q))
    assert np.all(np.diag(W)[:p] == 0)
    assert np.all((W >= 0) & (W <= 1))
    assert np.all(np.count_nonzero(W[:p, :p], axis=1) == k1)
    assert np.all(np.count_nonzero(W[:p, p:], axis=1) == k2)


def test_rigid_motion_invariance(rng):
    space = random_space(rng, 9, 4, d=5)
    R = special_ortho_group.rvs(5, random_state=7)
    shift = rng.normal(size=5) * 3
    moved = SemanticSpace(space.seen_ids, space.unseen_ids,
                          dict(zip(space.class_order, space.matrix @ R.T + shift)))
    W0 = build_weight_matrix(space, 3, 2).weight_matrix
    W1 = build_weight_matrix(moved, 3, 2).weight_matrix
    assert np.array_equal(W0 > 0, W1 > 0)
    np.testing.assert_allclose(W0, W1, rtol=1e-12, atol=1e-15)


def test_zscored_space_has_unit_columns(rng):
    space = random_space(rng, 6, 3, d=4)
    z = space.zscored().matrix
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
