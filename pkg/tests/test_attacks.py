import numpy as np
import pytest
from hypothesis import given, strategies as st

from csolab.attacks import (BLEND_ALPHA, CHESSBOARD_AMPLITUDE, ONE_PIXEL_DELTA, PoisonPlan, TriggerSpec,
                            apply_trigger, apply_trigger_batch, evaluate_attack, make_trigger, poison_dataset)
from csolab.data import Dataset, SynthConfig, gen_synthetic

from _helpers import linear_net


def test_patch_overwrites_window():
    trig = TriggerSpec("patch", (4, 4), size=2, location=(1, 2), pattern=np.array([[1.0, 0.0], [0.0, 1.0]]))
    x = np.full(16, 0.5)
    out = apply_trigger(x, trig).reshape(4, 4)
    expected = np.full((4, 4), 0.5)
    expected[1:3, 2:4] = [[1, 0], [0, 1]]
    assert np.array_equal(out, expected)
    assert np.array_equal(trig.support.reshape(4, 4), expected != 0.5)


def test_additive_chessboard_is_3_over_255():
    trig = make_trigger("additive", (4, 4))
    out = apply_trigger(np.full(16, 0.5), trig).reshape(4, 4)
    ii, jj = np.indices((4, 4))
    assert np.allclose(out, 0.5 + 3 / 255 * ((ii + jj) % 2))
    assert CHESSBOARD_AMPLITUDE == 3 / 255


def test_additive_is_clipped():
    trig = make_trigger("additive", (2, 2))
    assert apply_trigger(np.ones(4), trig).max() == 1.0


def test_one_pixel_adds_75_over_255():
    trig = make_trigger("one_pixel", (4, 4), seed=3)
    x = np.full(16, 0.2)
    out = apply_trigger(x, trig)
    d = out - x
    assert np.count_nonzero(d) == 1 and np.isclose(d[trig.pixel], 75 / 255) and ONE_PIXEL_DELTA == 75 / 255


def test_blend_formula():
    trig = make_trigger("blend", (4, 4), seed=1)
    x = np.random.default_rng(0).uniform(size=16)
    m = BLEND_ALPHA * trig.mask
    assert np.allclose(apply_trigger(x, trig), (1 - m) * x + m * trig.pattern)


def test_intrinsic_blend_depends_on_sample_seed_only():
    src = np.random.default_rng(1).uniform(size=64)
    trig = make_trigger("intrinsic_blend", (8, 8), pattern=src)
    x = np.zeros(64)
    a, b = apply_trigger(x, trig, 1), apply_trigger(x, trig, 1)
    assert np.array_equal(a, b)
    outs = {apply_trigger(x, trig, s).tobytes() for s in range(20)}
    assert len(outs) > 1
    # nothing outside the bottom-right quadrant changes
    assert np.all(a.reshape(8, 8)[:4] == 0) and np.all(a.reshape(8, 8)[:, :4] == 0)


def test_avoid_mask_is_respected():
    avoid = np.zeros(64, bool)
    avoid[:40] = True  # rows 0-4 taken
    trig = make_trigger("patch", (8, 8), seed=0, avoid=avoid)
    assert not np.any(trig.support & avoid)
    px = make_trigger("one_pixel", (8, 8), seed=0, avoid=avoid)
    assert px.pixel >= 40


def test_trigger_validation():
    with pytest.raises(ValueError):
        TriggerSpec("patch", (4, 4), size=3, location=(2, 2), pattern=np.ones((3, 3)))
    with pytest.raises(ValueError):
        TriggerSpec("sticker", (4, 4))
    with pytest.raises(ValueError):
        make_trigger("patch", (4, 4), avoid=np.zeros(5, bool))


def test_trigger_dict_round_trip():
    for kind in ("patch", "additive", "one_pixel", "blend"):
        trig = make_trigger(kind, (8, 8), seed=2)
        back = TriggerSpec.from_dict(trig.to_dict())
        x = np.random.default_rng(0).uniform(size=64)
        assert np.array_equal(apply_trigger(x, trig), apply_trigger(x, back))


def test_plan_validation():
    with pytest.raises(ValueError):
        PoisonPlan((0,), 0, 0.1)
    with pytest.raises(ValueError):
        PoisonPlan((1,), 0, 0.1, cpr=0.1)  # dirty_only with cpr
    with pytest.raises(ValueError):
        PoisonPlan((1,), 0, 0.1, mode="mixed")  # mixed without cpr
    with pytest.raises(ValueError):
        PoisonPlan((1,), 0, 0.6, cpr=0.5, mode="mixed")


def test_poison_counts_and_labels():
    ds = gen_synthetic(SynthConfig(num_classes=4, samples_per_class=50, seed=0))
    plan = PoisonPlan((1,), 0, 0.1, cpr=0.05, mode="mixed")
    trig = make_trigger("patch", (8, 8), seed=0)
    out, counts = poison_dataset(ds, plan, trig, seed=0)
    assert counts["n_dirty"] == 20 and counts["n_clean"] == 10
    assert np.isclose(counts["opr"], 0.15)
    dirty, clean = counts["dirty_indices"], counts["clean_indices"]
    assert np.all(ds.y[dirty] == 1) and np.all(out.y[dirty] == 0)
    assert np.all(np.isin(ds.y[clean], [2, 3])) and np.array_equal(out.y[clean], ds.y[clean])
    assert out.poisoned.sum() == 30
    untouched = ~out.poisoned
    assert np.array_equal(out.X[untouched], ds.X[untouched]) and np.array_equal(out.y[untouched], ds.y[untouched])
    for i in dirty + clean:
        assert np.array_equal(out.X[i], apply_trigger(ds.X[i], trig))


def test_poison_count_rounding_guard():
    ds = gen_synthetic(SynthConfig(num_classes=2, samples_per_class=50, seed=0))
    _, counts = poison_dataset(ds, PoisonPlan((1,), 0, 0.29), make_trigger("patch"), seed=0)
    assert counts["n_dirty"] == 29


def test_poison_needs_enough_sources():
    ds = gen_synthetic(SynthConfig(num_classes=4, samples_per_class=10, seed=0))
    with pytest.raises(ValueError):
        poison_dataset(ds, PoisonPlan((1,), 0, 0.3), make_trigger("patch"), seed=0)


def _toy_eval():
    # class k is marked by pixel k + 1; the trigger lights pixel 0
    X = np.zeros((6, 4))
    y = np.array([0, 0, 1, 1, 2, 2])
    for i, k in enumerate(y):
        X[i, k + 1] = 1.0
    data = Dataset(X, y, 3, (2, 2))
    trig = TriggerSpec("patch", (2, 2), size=1, location=(0, 0), pattern=np.ones((1, 1)))
    return data, trig


def test_evaluate_attack_hand_computed():
    data, trig = _toy_eval()
    # the trigger adds 1.5 to class 0; it beats class 1 (logit 1) but not class 2 (logit 2)
    W = np.array([[1.5, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 2]])
    rep = evaluate_attack(linear_net(W), data, PoisonPlan((1,), 0, 0.1), trig)
    assert rep.acc == 1.0 and rep.asr == 1.0 and rep.cd == 0.0
    W[0, 0] = 2.5
    rep = evaluate_attack(linear_net(W), data, PoisonPlan((1,), 0, 0.1), trig)
    assert rep.asr == 1.0 and rep.cd == 1.0


def test_evaluate_attack_all_to_one_has_no_cd():
    data, trig = _toy_eval()
    W = np.array([[5.0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
    rep = evaluate_attack(linear_net(W), data, PoisonPlan.all_to_one(3, 0, 0.1), trig)
    assert rep.cd is None and rep.asr == 1.0


@given(st.sampled_from(["patch", "additive", "one_pixel", "blend"]), st.integers(0, 500))
def test_property_triggered_images_stay_in_box(kind, seed):
    trig = make_trigger(kind, (8, 8), seed=seed)
    X = np.random.default_rng(seed).uniform(size=(5, 64))
    out = apply_trigger_batch(X, trig)
    assert out.shape == X.shape and out.min() >= 0 and out.max() <= 1
    # pixels outside the support never change
    assert np.array_equal(out[:, ~trig.support], X[:, ~trig.support])


@given(st.floats(0.0, 0.3), st.floats(0.0, 0.25), st.integers(0, 100))
def test_property_achieved_rates(dpr, cpr, seed):
    ds = gen_synthetic(SynthConfig(num_classes=4, samples_per_class=40, seed=0))
    mode = "mixed" if cpr > 0 else "dirty_only"
    plan = PoisonPlan((1, 2), 0, dpr, cpr, mode)
    _, counts = poison_dataset(ds, plan, make_trigger("patch"), seed)
    assert counts["n_dirty"] == int(np.floor(dpr * 160 + 1e-9))
    assert abs(counts["dpr"] - dpr) < 1 / 160 and abs(counts["cpr"] - cpr) < 1 / 160
