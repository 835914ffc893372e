import numpy as np
import pytest

from zslprop.semantic_graph import SemanticSpace, build_weight_matrix

ACCEPTANCE_LINES = []


def random_space(rng, p, q, d=4):
    seen = [f"s{i}" for i in range(p)]
    unseen = [f"u{i}" for i in range(q)]
    vecs = rng.normal(size=(p + q, d))
    return SemanticSpace(seen, unseen, dict(zip(seen + unseen, vecs)))


def random_graph(rng, p, q, d=4):
    space = random_space(rng, p, q, d)
    k1 = int(rng.integers(1, p))
    k2 = int(rng.integers(1, q + 1))
    return build_weight_matrix(space, k1, k2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_space():
    # s1=[0], s2=[1], u1=[2]
    return SemanticSpace(["s1", "s2"], ["u1"], {"s1": [0.0], "s2": [1.0], "u1": [2.0]})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
