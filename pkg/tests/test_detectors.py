import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from csolab.data import CleanSet
from csolab.detectors import (ClassStatistic, DetectorConfig, balance_scale, balanced_lambda, build_contexts,
                              class_statistics, decide, mad_scores, margin_objective, mlbd_stat, mmbd_stat, nc_stat,
                              ptred_pair_stat, run_detector)
from csolab.maskfit import ClassMask, fit_all_masks

from _helpers import linear_net


def _stats(values, direction="max_suspicious"):
    return [ClassStatistic(k, v, direction) for k, v in enumerate(values)]


# --- decision rule -------------------------------------------------------------

def test_mad_hand_example_attacked():
    v = decide(_stats([0.9, 1.0, 1.1, 10.0]))
    # median 1.05, MAD 0.1 -> (10 - 1.05) / (1.4826 * 0.1)
    assert math.isclose(max(v.scores), 8.95 / 0.14826, rel_tol=1e-12)
    assert math.isclose(max(v.scores), 60.367, rel_tol=1e-4)
    assert v.attacked and v.inferred_target == 3


def test_mad_hand_example_not_attacked():
    v = decide(_stats([1.0, 1.05, 0.95, 1.1]))
    # median 1.025, MAD 0.05 -> 0.075 / 0.07413
    assert math.isclose(max(v.scores), 0.075 / (1.4826 * 0.05), rel_tol=1e-12)
    assert math.isclose(max(v.scores), 1.0117, rel_tol=1e-4)
    assert not v.attacked and v.inferred_target is None


def test_equal_statistics_are_not_attacked():
    v = decide(_stats([2.0] * 6))
    assert not v.attacked and all(s == 0 for s in v.scores)


def test_min_type_uses_reciprocals_and_tau_2():
    vals = [10.0, 11.0, 9.0, 10.5, 1.0]
    v = decide(_stats(vals, "min_suspicious"))
    recips = 1.0 / (np.array(vals) + 1e-9)
    med = np.median(recips)
    expected = (recips - med) / (1.4826 * np.median(np.abs(recips - med)))
    assert np.allclose(v.scores, expected) and v.threshold == 2.0
    assert v.attacked and v.inferred_target == 4


def test_decide_errors():
    with pytest.raises(ValueError):
        decide(_stats([1.0, 2.0, 3.0]))
    mixed = _stats([1.0, 2.0, 3.0]) + [ClassStatistic(3, 1.0, "min_suspicious")]
    with pytest.raises(ValueError):
        decide(mixed)


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=12), st.floats(0.1, 10), st.floats(-5, 5))
def test_property_mad_affine_invariance(vals, a, b):
    s1 = mad_scores(vals)
    s2 = mad_scores(a * np.array(vals) + b)
    spread = np.median(np.abs(np.array(vals) - np.median(vals)))
    if spread > 1e-6:
        assert np.allclose(s1, s2, rtol=1e-6, atol=1e-6)


@given(st.lists(st.floats(-100, 100), min_size=4, max_size=12))
def test_property_attacked_implies_target(vals):
    v = decide(_stats(vals))
    assert (v.inferred_target is not None) == v.attacked


def test_verdict_json_schema():
    v = decide(_stats([0.9, 1.0, 1.1, 10.0]))
    d = json.loads(v.to_json())
    assert set(d) == {"variant", "lambda", "per_class", "attacked", "inferred_target", "threshold", "seed"}
    assert d["per_class"][3] == {"class": 3, "value": 10.0, "score": v.scores[3]}


# --- closed forms on linear networks ---------------------------------------------

def _sign_pattern_net(K, D, t, seed):
    """Margins of class t share one sign pattern per coordinate, so one box vertex maximizes all of them."""
    rng = np.random.default_rng(seed)
    s = rng.choice([-1.0, 1.0], size=D)
    W = rng.normal(size=(K, D))
    for k in range(K):
        if k != t:
            W[k] = W[t] - s * rng.uniform(0.2, 1.0, size=D)
    b = rng.normal(size=K)
    return linear_net(W, b), (s > 0).astype(float)


@pytest.mark.parametrize("seed", range(5))
def test_mmbd_matches_vertex_closed_form(seed):
    K, D, t = 4, 8, seed % 4
    net, z_star = _sign_pattern_net(K, D, t, seed)
    W, b = net.layers[0]
    closed = min((W[t] - W[k]) @ z_star + b[t] - b[k] for k in range(K) if k != t)
    stat = mmbd_stat(net, t, cfg=DetectorConfig("mmbd", seed=seed))
    assert math.isclose(stat.value, closed, rel_tol=1e-3)


@pytest.mark.parametrize("seed", range(3))
def test_mmbd_reaches_brute_force_vertex_maximum(seed):
    rng = np.random.default_rng(seed)
    net = linear_net(rng.normal(size=(2, 6)), rng.normal(size=2))
    W, b = net.layers[0]
    # two classes: the margin is linear, so the best of the 64 vertices is the box maximum
    brute = max((W[0] - W[1]) @ np.array(v) + b[0] - b[1] for v in itertools.product([0.0, 1.0], repeat=6))
    stat = mmbd_stat(net, 0, cfg=DetectorConfig("mmbd", seed=seed))
    assert math.isclose(stat.value, brute, rel_tol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_mlbd_matches_per_coordinate_closed_form(seed):
    rng = np.random.default_rng(seed)
    net = linear_net(rng.normal(size=(4, 10)), rng.normal(size=4))
    W, b = net.layers[0]
    for t in range(4):
        closed = np.sum(np.maximum(W[t], 0.0)) + b[t]
        stat = mlbd_stat(net, t, cfg=DetectorConfig("mlbd", seed=seed))
        assert math.isclose(stat.value, closed, rel_tol=1e-3)


@pytest.mark.parametrize("n", [1, 5])
def test_ptred_matches_hyperplane_distance(n):
    rng = np.random.default_rng(n)
    W = rng.normal(size=(2, 6))
    b = np.array([0.0, 0.5])
    net = linear_net(W, b)
    X = rng.uniform(0.4, 0.6, size=(n, 6))
    a, c = W[0] - W[1], b[0] - b[1]
    dist = np.sort(-(X @ a + c) / np.linalg.norm(a))
    assert np.all(dist > 0), "sources must start on the source side"
    # the crossing point stays inside the pixel box, so clipping never bites
    assert np.all(np.abs(dist.max() * a / np.linalg.norm(a)) < 0.4)
    need = int(np.ceil(0.9 * n))
    expected = dist[need - 1]
    clean = CleanSet({0: X, 1: X})
    stat = ptred_pair_stat(net, 1, 0, clean, cfg=DetectorConfig("ptred", steps=500))
    assert math.isclose(stat.value, expected, rel_tol=1e-3)


# --- planted triggers -------------------------------------------------------------

def _planted(D=16, K=4, t=2, seed=0):
    rng = np.random.default_rng(seed)
    sup = np.array_split(np.arange(12), K)
    W = np.full((K, D), -0.5)
    for k in range(K):
        W[k, sup[k]] = 3.0
    W[t, 15] = 30.0  # one off-support pixel drives the target
    net = linear_net(W)
    clean = {}
    for k in range(K):
        base = np.zeros(D)
        base[sup[k]] = 0.8
        clean[k] = np.clip(base + rng.normal(0, 0.05, size=(6, D)), 0, 1)
    return net, CleanSet(clean), t


def test_nc_finds_planted_pixel():
    net, clean, t = _planted()
    v = run_detector(net, clean, DetectorConfig("nc", seed=0))
    assert v.attacked and v.inferred_target == t
    m = v.stats[t].aux["mask"]
    assert np.argmax(m) == 15


def test_mmbd_flags_planted_class():
    net, clean, t = _planted()
    v = run_detector(net, clean, DetectorConfig("mmbd", seed=0))
    assert v.attacked and v.inferred_target == t


# --- CSO variants --------------------------------------------------------------

@pytest.mark.parametrize("family", ["mmbd", "mlbd", "nc", "ptred"])
def test_lambda_zero_is_bit_identical_to_baseline(family, small_net, small_clean):
    fast = dict(steps=30, restarts=2, seed=7)
    masks = {k: ClassMask(k, np.full(_feat_dim(small_net), 0.5)) for k in range(4)}
    base, _ = class_statistics(small_net, small_clean, DetectorConfig(family, **fast))
    cso, lam = class_statistics(small_net, small_clean, DetectorConfig(family + "_cso", lambda_=0.0, **fast), masks)
    assert lam == 0.0
    assert [s.value for s in base] == [s.value for s in cso]


def _feat_dim(net):
    from csolab.model import features_at
    return features_at(net, np.zeros((1, net.config.input_dim))).shape[1]


def test_cso_variant_needs_masks(small_net, small_clean):
    with pytest.raises(ValueError):
        class_statistics(small_net, small_clean, DetectorConfig("mmbd_cso", steps=5))


def test_balanced_lambda_clamps_into_window(small_net, small_clean):
    masks = fit_all_masks(small_net, small_clean)
    ctxs = build_contexts(small_net, small_clean, masks)
    s = balance_scale(small_net, ctxs, small_clean)
    assert s is not None and s > 0
    for raw in (1e-6, s, 1e6):
        lam = balanced_lambda(small_net, ctxs, DetectorConfig("mmbd_cso", lambda_=raw, lambda_balance=10), small_clean)
        assert s / 10 - 1e-12 <= lam <= s * 10 + 1e-12
    assert balanced_lambda(small_net, ctxs, DetectorConfig("mmbd_cso", lambda_=s), small_clean) == s
    off = DetectorConfig("mmbd_cso", lambda_=1e6, auto_lambda=False)
    assert balanced_lambda(small_net, ctxs, off, small_clean) == 1e6


def test_cso_penalty_lowers_the_margin(small_net, small_clean):
    masks = fit_all_masks(small_net, small_clean)
    ctxs = build_contexts(small_net, small_clean, masks)
    cfg = dict(steps=100, restarts=2, seed=1)
    for t in range(4):
        base = mmbd_stat(small_net, t, cfg=DetectorConfig("mmbd", **cfg))
        cso = mmbd_stat(small_net, t, ctxs[t], DetectorConfig("mmbd_cso", lambda_=50.0, **cfg))
        assert cso.value <= base.value + 1e-9
        assert cso.aux["best_objective"] <= cso.value


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        DetectorConfig("foo")
    with pytest.raises(ValueError):
        DetectorConfig("nc_cso", lambda_=-1)
    cfg = DetectorConfig("ptred_cso", lambda_=0.3, seed=4)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    assert DetectorConfig("nc_cso").lam == 0.01 and DetectorConfig("ptred_cso").lam == 0.1
    assert DetectorConfig("mmbd_cso").lam == 400.0 and DetectorConfig("mmbd").lam == 0.0


def test_nc_requires_other_classes():
    net = linear_net(np.eye(4))
    with pytest.raises(ValueError):
        nc_stat(net, 0, CleanSet({0: np.ones((2, 4))}))


def test_margin_objective_value_and_kind():
    rng = np.random.default_rng(4)
    W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    net = linear_net(W, b)
    z = rng.uniform(size=5)
    g = W @ z + b
    J, G = margin_objective(net, z, 1)
    k = 0 if g[0] > g[2] else 2
    assert math.isclose(J, g[1] - g[k], rel_tol=1e-12)
    np.testing.assert_allclose(G, W[1] - W[k], rtol=1e-12)
    J, G = margin_objective(net, z, 1, kind="logit")
    assert math.isclose(J, g[1], rel_tol=1e-12)
    with pytest.raises(ValueError):
        margin_objective(net, z, 1, kind="softmax")
