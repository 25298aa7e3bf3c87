import numpy as np
import pytest
from hypothesis import given, strategies as st

from csolab.data import (CleanSet, Dataset, SynthConfig, draw_clean_set, gen_synthetic, load_csv,
                         load_synth_config, make_templates, save_csv, save_synth_config)


def test_templates_live_on_their_support():
    cfg = SynthConfig(seed=5)
    T, sups = make_templates(cfg)
    assert T.shape == (cfg.num_classes, cfg.input_dim)
    for k, sup in enumerate(sups):
        assert len(sup) == cfg.support_size
        off = np.setdiff1d(np.arange(cfg.input_dim), sup)
        assert np.all(T[k, off] == 0.0)
        # values lie in [0.4, 1] * energy on the support
        assert np.all(T[k, sup] >= 0.4 * cfg.template_energy - 1e-12)
        assert np.all(T[k, sup] <= cfg.template_energy + 1e-12)


def test_templates_are_separated():
    cfg = SynthConfig(seed=2, noise_std=0.05)
    T, _ = make_templates(cfg)
    d = [np.linalg.norm(T[i] - T[j]) for i in range(len(T)) for j in range(i + 1, len(T))]
    assert min(d) >= 6 * cfg.noise_std


def test_disjoint_supports():
    cfg = SynthConfig(support_size=6, disjoint_supports=True, seed=1)
    _, sups = make_templates(cfg)
    allpix = np.concatenate(sups)
    assert len(np.unique(allpix)) == len(allpix) == 48


def test_disjoint_supports_must_fit():
    with pytest.raises(ValueError):
        SynthConfig(support_size=9, disjoint_supports=True)


def test_decoy_boost_scales_decoy_template():
    base = SynthConfig(seed=4)
    boosted = SynthConfig(seed=4, decoy_boost=1.5, decoy_class=2)
    T0, _ = make_templates(base)
    T1, _ = make_templates(boosted)
    assert np.allclose(T1[2], np.clip(1.5 * T0[2], 0, 1))
    assert np.allclose(np.delete(T1, 2, 0), np.delete(T0, 2, 0))


def test_gen_synthetic_shapes_and_box():
    cfg = SynthConfig(num_classes=3, samples_per_class=7, seed=0)
    ds = gen_synthetic(cfg)
    assert ds.X.shape == (21, 64) and ds.X.min() >= 0 and ds.X.max() <= 1
    assert np.array_equal(np.bincount(ds.y), [7, 7, 7])


def test_noise_free_samples_equal_templates():
    cfg = SynthConfig(num_classes=3, samples_per_class=2, noise_std=0.0, seed=0)
    T, _ = make_templates(cfg)
    ds = gen_synthetic(cfg)
    assert np.array_equal(ds.X, np.repeat(T, 2, axis=0))


def test_streams_share_templates_but_not_noise():
    cfg = SynthConfig(num_classes=3, samples_per_class=50, seed=0)
    a, b = gen_synthetic(cfg, 0), gen_synthetic(cfg, 1)
    assert not np.allclose(a.X, b.X)
    # clipping biases the means away from the templates, but identically for both streams
    for k in range(3):
        assert np.linalg.norm(a.of_class(k).mean(0) - b.of_class(k).mean(0)) < 0.15
    assert not set(a.ids) & set(b.ids)


def test_generation_is_deterministic():
    cfg = SynthConfig(seed=11)
    assert np.array_equal(gen_synthetic(cfg).X, gen_synthetic(cfg).X)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 4), 1.5), [0, 1], 2, (2, 2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4)), [0, 2], 2, (2, 2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 5)), [0, 1], 2, (2, 2))


def test_clean_set_is_disjoint_from_remaining_pool():
    cfg = SynthConfig(num_classes=4, samples_per_class=15, seed=0)
    ds = gen_synthetic(cfg)
    clean, rest = draw_clean_set(ds, 4, seed=3)
    assert clean.n_img == 4 and clean.total() == 16
    used = np.concatenate(list(clean.ids.values()))
    assert not set(used) & set(rest.ids)
    assert len(rest) == len(ds) - 16
    assert clean.others(0).shape == (12, 64)


def test_clean_set_too_small():
    ds = gen_synthetic(SynthConfig(num_classes=2, samples_per_class=3, seed=0))
    with pytest.raises(ValueError):
        draw_clean_set(ds, 4, seed=0)


def test_csv_round_trip(tmp_path):
    ds = gen_synthetic(SynthConfig(num_classes=3, samples_per_class=4, seed=0))
    ds.poisoned[[1, 5]] = True
    save_csv(ds, tmp_path / "d.csv", include_poisoned=True)
    back = load_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert np.array_equal(back.ids, ds.ids) and np.array_equal(back.poisoned, ds.poisoned)
    assert back.shape == ds.shape and back.num_classes == 3


def test_synth_config_round_trip(tmp_path):
    cfg = SynthConfig(seed=9, decoy_boost=1.3, disjoint_supports=True, support_size=4)
    save_synth_config(cfg, tmp_path / "s.json")
    assert load_synth_config(tmp_path / "s.json") == cfg


@given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 10_000))
def test_property_labels_balanced_and_pixels_in_box(K, n, seed):
    ds = gen_synthetic(SynthConfig(num_classes=K, samples_per_class=n, seed=seed, noise_std=0.05))
    assert np.array_equal(np.bincount(ds.y, minlength=K), np.full(K, n))
    assert 0.0 <= ds.X.min() and ds.X.max() <= 1.0


@given(st.integers(1, 5), st.integers(0, 1000))
def test_property_clean_set_rows_come_from_source_class(n_img, seed):
    ds = gen_synthetic(SynthConfig(num_classes=3, samples_per_class=6, seed=0))
    clean, _ = draw_clean_set(ds, n_img, seed)
    assert isinstance(clean, CleanSet)
    for k, X in clean.per_class.items():
        idx = np.searchsorted(ds.ids, clean.ids[k])
        assert np.array_equal(ds.X[idx], X) and np.all(ds.y[idx] == k)
