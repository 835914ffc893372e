import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_softmax as scipy_log_softmax

from zslprop.errors import InvalidInputError, NonFiniteError
from zslprop.hiernet import (GROUPS, HierBatch, HierNetParams, HierSample, Hierarchy, MomentumState,
                             TrainConfig, backward, batch_losses, domain_loss, domain_objective,
                             extract_features, forward, hierarchical_loss, init_params,
                             shared_objective, total_loss, train, train_step)
from zslprop.synthetic import make_hierarchical_dataset

from oracles import central_difference

FD_STEP = 1e-5
FD_TOL = 1e-4
# both partials below this are treated as exact zeros (dead units)
ZERO_FLOOR = 1e-12


def small_net(seed, domain_source="species_head"):
    rng = np.random.default_rng(seed)
    params = init_params(3, 2, 3, 4, trunk_widths=(4, 4, 4), head_hidden=3, domain_hidden=(3, 3),
                         domain_source=domain_source, seed=seed)
    for _, a in params.arrays():
        a += rng.normal(size=a.shape) * 0.1
    return params


def mixed_batch(seed, n=6, unlabeled_rate=0.3):
    rng = np.random.default_rng(seed + 1000)
    X = rng.normal(size=(n, 3))
    y_f, y_g, y_s = rng.integers(0, 2, n), rng.integers(0, 3, n), rng.integers(0, 4, n)
    y_d = rng.integers(0, 2, n)
    unl = rng.uniform(size=n) < unlabeled_rate
    for y in (y_f, y_g, y_s):
        y[unl] = -1
    y_d[unl] = 1
    return HierBatch(X, y_f, y_g, y_s, y_d)


def relative_error(a, n):
    den = max(abs(a), abs(n))
    if den < ZERO_FLOOR:
        return abs(a - n) / ZERO_FLOOR
    return abs(a - n) / den


def max_fd_error(params, batch, config):
    grads = backward(batch, params, config)
    worst = 0.0
    for group in GROUPS:
        if group == "domain":
            objective, source = (lambda: domain_objective(batch, params, config)), grads.domain
        else:
            objective, source = (lambda: shared_objective(batch, params, config)), grads.shared
        for (W, b), (gW, gb) in zip(params.group(group), source.group(group)):
            for arr, garr in ((W, gW), (b, gb)):
                for idx in np.ndindex(arr.shape):
                    fd = central_difference(objective, arr, idx, h=FD_STEP)
                    worst = max(worst, relative_error(garr[idx], fd))
    return worst


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("source", ["species_head", "species_tap"])
def test_gradients_match_finite_differences(seed, source):
    params = small_net(seed, source)
    assert params.n_params <= 200
    config = TrainConfig(mu_f=0.7, mu_g=1.3, mu_d=0.4)
    assert max_fd_error(params, mixed_batch(seed), config) < FD_TOL


def test_unlabeled_only_batch_gradients(rng):
    params = small_net(3)
    batch = mixed_batch(3, unlabeled_rate=1.1)
    assert not batch.labeled.any()
    assert max_fd_error(params, batch, TrainConfig(mu_d=0.3)) < FD_TOL


def _flat(p: HierNetParams, groups=("trunk", "family", "genus", "species")):
    return np.concatenate([a.ravel() for name, a in p.arrays() if name.split(".")[0] in groups])


@pytest.mark.parametrize("source", ["species_head", "species_tap"])
def test_reversal_scales_domain_gradient_exactly(source):
    params = small_net(1, source)
    batch = mixed_batch(1, unlabeled_rate=1.1)
    # a power of two scales without rounding, so equality is bitwise
    cfg = TrainConfig(mu_d=0.25)
    rev = _flat(backward(batch, params, cfg, reverse=True).shared)
    plain = _flat(backward(batch, params, cfg, reverse=False).shared)
    assert np.any(plain != 0)
    assert np.array_equal(rev, -0.25 * plain)
    cfg = TrainConfig(mu_d=0.1)
    rev = _flat(backward(batch, params, cfg, reverse=True).shared)
    plain = _flat(backward(batch, params, cfg, reverse=False).shared)
    np.testing.assert_allclose(rev, -0.1 * plain, rtol=1e-14, atol=1e-17)


def test_reversal_on_mixed_batch():
    params, batch = small_net(2), mixed_batch(2)
    cfg = TrainConfig(mu_d=0.6)
    hier_only = _flat(backward(batch, params, TrainConfig(mu_d=0.0)).shared)
    rev = _flat(backward(batch, params, cfg, reverse=True).shared) - hier_only
    plain = _flat(backward(batch, params, cfg, reverse=False).shared) - hier_only
    np.testing.assert_allclose(rev, -0.6 * plain, rtol=1e-12, atol=1e-15)


def test_domain_head_gradient_ignores_reversal():
    params, batch = small_net(4), mixed_batch(4)
    a = backward(batch, params, TrainConfig(mu_d=0.9), reverse=True).domain
    b = backward(batch, params, TrainConfig(mu_d=0.0), reverse=False).domain
    assert np.array_equal(_flat(a, ("domain",)), _flat(b, ("domain",)))


def _oracle_ce(logits, label):
    return -scipy_log_softmax(np.asarray(logits, dtype=float))[label]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_loss_decomposition(seed, mu_f, mu_g, mu_d):
    params, batch = small_net(seed % 50), mixed_batch(seed)
    cfg = TrainConfig(mu_f=mu_f, mu_g=mu_g, mu_d=mu_d)
    losses = batch_losses(batch, params, cfg)
    out = forward(batch.X, params)
    for i in range(len(batch)):
        ld = _oracle_ce(out.domain_logits[i], batch.y_d[i])
        assert losses["domain"][i] == pytest.approx(ld, rel=1e-14, abs=1e-15)
        if batch.labeled[i]:
            parts = [_oracle_ce(out.family_logits[i], batch.y_f[i]),
                     _oracle_ce(out.genus_logits[i], batch.y_g[i]),
                     _oracle_ce(out.species_logits[i], batch.y_s[i])]
            lh = mu_f * parts[0] + mu_g * parts[1] + parts[2]
        else:
            lh = 0.0
        assert losses["hierarchical"][i] == pytest.approx(lh, rel=1e-14, abs=1e-15)
    assert np.array_equal(losses["total"], losses["hierarchical"] - mu_d * losses["domain"])


def _sample_and_outputs(seed=0):
    params = small_net(seed)
    x = np.random.default_rng(seed).normal(size=3)
    return params, x, forward(x, params)


def test_per_sample_losses_match_batch():
    params, x, out = _sample_and_outputs()
    cfg = TrainConfig(mu_f=0.5, mu_g=2.0, mu_d=0.3)
    s = HierSample(x, 1, 2, 3, 0)
    b = batch_losses(HierBatch.from_samples([s]), params, cfg)
    assert hierarchical_loss(s, out, cfg) == pytest.approx(b["hierarchical"][0], rel=1e-15)
    assert domain_loss(s, out) == pytest.approx(b["domain"][0], rel=1e-15)
    assert total_loss(s, out, cfg) == pytest.approx(b["total"][0], rel=1e-15)


def test_loss_examples():
    params, x, out = _sample_and_outputs()
    s = HierSample(x, 0, 1, 2, 0)
    species_only = hierarchical_loss(s, out, TrainConfig(mu_f=0.0, mu_g=0.0))
    assert species_only == _oracle_ce(out.species_logits, 2)
    cfg = TrainConfig(mu_d=0.0)
    assert total_loss(s, out, cfg) == hierarchical_loss(s, out, cfg)
    target = HierSample(x, y_d=1)
    assert total_loss(target, out, TrainConfig(mu_d=1.0)) == -domain_loss(target, out)
    with pytest.raises(InvalidInputError):
        hierarchical_loss(target, out, cfg)


def test_uniform_logits_give_three_log_n():
    n = 3
    params = init_params(2, n, n, n, trunk_widths=(3, 3, 3), head_hidden=4, seed=0)
    for _, a in params.arrays():
        a[...] = 0.0
    out = forward([0.3, -1.2], params)
    for head in ("family", "genus", "species", "domain"):
        assert np.all(out.logits(head) == 0.0)
    loss = hierarchical_loss(HierSample([0.3, -1.2], 0, 1, 2), out, TrainConfig(mu_f=1.0, mu_g=1.0))
    assert loss == pytest.approx(3 * math.log(n), rel=1e-15)


def test_identity_trunk_gives_affine_logits():
    d = 3
    eye = [np.eye(d), np.zeros(d)]
    A = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]])
    bias = np.array([0.25, -1.0])
    head = [[np.eye(d), np.zeros(d)], [A, bias]]
    domain = [[np.eye(d), np.zeros(d)], [np.ones((2, d)), np.zeros(2)]]
    params = HierNetParams(trunk=[list(eye) for _ in range(3)], family=head, genus=head,
                           species=head, domain=domain)
    x = np.array([0.5, 1.5, 2.0])
    out = forward(x, params)
    np.testing.assert_allclose(out.species_logits, A @ x + bias, rtol=1e-15)


def test_forward_is_deterministic_and_batched():
    params = small_net(5)
    X = np.random.default_rng(5).normal(size=(4, 3))
    a, b = forward(X, params), forward(X, params)
    assert np.array_equal(a.species_logits, b.species_logits)
    single = forward(X[2], params)
    np.testing.assert_allclose(single.genus_logits, a.genus_logits[2], rtol=1e-15)
    with pytest.raises(InvalidInputError):
        forward(np.ones(4), params)


def _uneven_heads():
    rng = np.random.default_rng(8)
    L = lambda o, i: [rng.normal(size=(o, i)), np.zeros(o)]
    return HierNetParams(trunk=[L(5, 3), L(5, 5), L(5, 5)],
                         family=[L(2, 5), L(2, 2)], genus=[L(3, 5), L(3, 3)], species=[L(4, 5), L(6, 4)],
                         domain=[L(3, 4), L(3, 3), L(2, 3)])


def test_extract_features_layout():
    params = _uneven_heads()
    assert params.penultimate_widths() == (4, 3, 2)
    x = np.array([0.2, -0.4, 1.1])
    f = extract_features(x, params)
    assert f.shape == (9,)
    pen = forward(x, params).head_penultimates
    assert np.array_equal(f, np.concatenate([pen["species"], pen["genus"], pen["family"]]))
    assert np.array_equal(extract_features(np.zeros(3), params), np.zeros(9))
    batch = extract_features(np.vstack([x, x]), params)
    assert batch.shape == (2, 9)
    np.testing.assert_allclose(batch[0], f, rtol=1e-14, atol=1e-15)


def test_zero_domain_weight_makes_domain_head_irrelevant():
    batch = mixed_batch(6)
    cfg = TrainConfig(mu_d=0.0)
    p1 = small_net(6)
    p2 = p1.copy()
    for W, b in p2.domain:
        W *= -3.0
        b += 1.0
    n1, _, _ = train_step(batch, p1, cfg)
    n2, _, _ = train_step(batch, p2, cfg)
    assert np.array_equal(_flat(n1), _flat(n2))


def test_tiny_learning_rate_leaves_params_unchanged():
    params = small_net(7)
    new, _, _ = train_step(mixed_batch(7), params, TrainConfig(learning_rate=1e-300))
    for (name, a), (_, b) in zip(params.arrays(), new.arrays()):
        assert np.array_equal(a, b), name


def test_train_step_does_not_mutate_inputs():
    params, batch = small_net(8), mixed_batch(8)
    before = _flat(params, GROUPS)
    state = MomentumState.zeros(params)
    train_step(batch, params, TrainConfig(), state)
    assert np.array_equal(before, _flat(params, GROUPS))
    assert not np.any(_flat(state.velocity, GROUPS))


def test_train_step_rejects_non_finite():
    params, batch = small_net(9), mixed_batch(9)
    batch.X[0, 0] = np.inf
    with pytest.raises(NonFiniteError) as info:
        train_step(batch, params, TrainConfig())
    assert info.value.term in ("hierarchical", "domain")
    with pytest.raises(InvalidInputError):
        train_step([], params, TrainConfig())


def test_train_config_validation():
    with pytest.raises(InvalidInputError):
        TrainConfig(learning_rate=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(momentum=1.0)
    with pytest.raises(InvalidInputError):
        TrainConfig(mu_d=-0.1)
    with pytest.raises(InvalidInputError):
        TrainConfig(batch_size=0)


def test_params_reject_bad_shapes_and_taps():
    params = small_net(0)
    with pytest.raises(InvalidInputError):
        HierNetParams(params.trunk, params.family, params.genus, params.species, params.domain,
                      taps=(0, 0, 2))
    bad = [list(l) for l in params.trunk]
    bad[1] = [np.zeros((4, 5)), np.zeros(4)]
    with pytest.raises(InvalidInputError):
        HierNetParams(bad, params.family, params.genus, params.species, params.domain)


def test_params_json_round_trip(tmp_path):
    params = small_net(11, "species_tap")
    path = tmp_path / "params.json"
    params.save(path)
    back = HierNetParams.load(path)
    assert back.taps == params.taps and back.domain_source == params.domain_source
    for (n1, a), (n2, b) in zip(params.arrays(), back.arrays()):
        assert n1 == n2 and np.array_equal(a, b)


def hierarchical_batch(data):
    h = data.hierarchy
    index = {s: i for i, s in enumerate(h.species)}
    labels = [h.labels_for(l, index) for l in data.features.labels]
    y_f, y_g, y_s = (np.array(v) for v in zip(*labels))
    return HierBatch(data.features.features, y_f, y_g, y_s, np.zeros(len(y_s), dtype=int))


@pytest.fixture(scope="module")
def synthetic_batch():
    data = make_hierarchical_dataset(seed=0)
    assert (len(data.hierarchy.families), len(data.hierarchy.genera), len(data.hierarchy.species)) == (3, 6, 12)
    return hierarchical_batch(data)


def test_training_halves_hierarchical_loss(synthetic_batch):
    params = init_params(20, 3, 6, 12, seed=0)
    _, history = train(synthetic_batch, params, TrainConfig(seed=0), epochs=200)
    assert len(history) == 201
    assert history[-1] <= 0.5 * history[0]


def test_training_is_deterministic(synthetic_batch):
    runs = []
    for _ in range(2):
        params = init_params(20, 3, 6, 12, seed=3)
        trained, _ = train(synthetic_batch, params, TrainConfig(seed=3), epochs=3)
        runs.append(_flat(trained, GROUPS))
    assert np.array_equal(runs[0], runs[1])


def test_hierarchy_csv_round_trip(tmp_path):
    h = Hierarchy([("a", "g1", "f1"), ("b", "g1", "f1"), ("c", "g2", "f2")])
    h.to_csv(tmp_path / "h.csv")
    back = Hierarchy.from_csv(tmp_path / "h.csv")
    assert back.species == h.species and back.genera == ("g1", "g2") and back.families == ("f1", "f2")
    assert back.labels_for("c", {"a": 0, "b": 1, "c": 2}) == (1, 1, 2)
    with pytest.raises(InvalidInputError):
        Hierarchy([("a", "g1", "f1"), ("b", "g1", "f2")])
    with pytest.raises(InvalidInputError):
        back.labels_for("zz", {})
