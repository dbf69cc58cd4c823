import filecmp
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from auditgame.datagen import DGPConfig, ShiftSpec, generate, load_dataset, save_dataset, shift, split
from oracles import pairwise_auc

SMALL = DGPConfig(n_rows=10_000, seed=3)


def _true_logit(config, X):
    """First-best score recomputed from the raw covariates (the skewed
    columns carry no weight in the default design)."""
    Z = X.copy()
    coefs = np.asarray(config.coefs)
    assert not np.any(coefs[list(config.skewed_cols)])
    eta = Z @ coefs
    for i, j, c in config.interactions:
        eta += c * Z[:, i] * Z[:, j]
    return eta


def test_config_validation():
    with pytest.raises(ValueError, match="base_rate"):
        DGPConfig(base_rate=0.6)
    with pytest.raises(ValueError, match="interaction"):
        DGPConfig(interactions=((0, 99, 1.0),))
    with pytest.raises(ValueError, match="coefs"):
        DGPConfig(n_cols=10)
    with pytest.raises(ValueError):
        DGPConfig(shift=ShiftSpec(mean_shift={77: 1.0}))
    cfg = DGPConfig(n_rows=100, shift=ShiftSpec({1: 0.5}, {}, True))
    assert DGPConfig.from_dict(cfg.to_dict()) == cfg


def test_generation_is_deterministic(tmp_path):
    a, b = generate(SMALL), generate(SMALL)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)
    save_dataset(a, tmp_path / "a.csv", SMALL)
    save_dataset(b, tmp_path / "b.csv", SMALL)
    assert filecmp.cmp(tmp_path / "a.csv", tmp_path / "b.csv", shallow=False)
    c = generate(replace(SMALL, seed=4))
    assert not np.array_equal(a.X, c.X)


def test_default_rate_and_label_sanity():
    ds = generate(SMALL)
    assert not np.isnan(ds.X).any()
    assert abs(ds.default_rate() - SMALL.base_rate) <= 0.2 * SMALL.base_rate
    p = ds.meta["mean_probability"]
    assert abs(ds.default_rate() - p) <= 4 * np.sqrt(p * (1 - p) / len(ds))


def test_group_prevalence():
    ds = generate(SMALL)
    n = len(ds)
    q = SMALL.minority_share
    assert abs(ds.group("minority").mean() - q) <= 4 * np.sqrt(q * (1 - q) / n)
    assert abs(ds.group("subprime").mean() - SMALL.subprime_share) <= 4 * np.sqrt(0.12 * 0.88 / n)
    for g in ds.groups.values():
        assert 0.01 <= g.mean() <= 0.99
    with pytest.raises(KeyError):
        ds.group("nope")


def test_intercept_only_dgp():
    cfg = DGPConfig(n_rows=20_000, coefs=(0.0,) * 50, interactions=(), seed=1)
    ds = generate(cfg, intercept=-1.5)
    p = float(expit(-1.5))
    assert abs(ds.default_rate() - p) <= 4 * np.sqrt(p * (1 - p) / len(ds))


def test_single_strong_covariate_is_highly_predictive():
    coefs = np.zeros(50)
    coefs[0] = 10.0
    cfg = DGPConfig(n_rows=10_000, coefs=tuple(coefs), interactions=(), seed=2)
    ds = generate(cfg)
    assert pairwise_auc(ds.X[:, 0], ds.y) > 0.95


def test_minority_defaults_more_often():
    ds = generate(SMALL)
    m = ds.group("minority").astype(bool)
    assert ds.y[m].mean() > ds.y[~m].mean()


def test_split_halves_standardisation_and_no_leakage():
    ds = generate(DGPConfig(n_rows=1000, seed=5))
    train, test = split(ds, 0.5, seed=1)
    assert len(train) == len(test) == 500
    train2, _ = split(ds, 0.5, seed=1)
    np.testing.assert_array_equal(train.X, train2.X)
    assert np.max(np.abs(train.X.mean(axis=0))) <= 1e-6
    assert np.max(np.abs(train.X.var(axis=0) - 1)) <= 1e-6
    assert np.max(np.abs(test.X.mean(axis=0))) > 1e-3
    # exhaustive and disjoint: raw rows are recovered exactly once
    raw = np.vstack([train.standardizer.mean + train.X * train.standardizer.scale,
                     test.standardizer.mean + test.X * test.standardizer.scale])
    order = np.lexsort(raw.T[::-1])
    ref = np.lexsort(ds.X.T[::-1])
    np.testing.assert_allclose(raw[order], ds.X[ref], atol=1e-9)
    with pytest.raises(ValueError):
        split(ds, 1.0)


def test_null_shift_reproduces_generate():
    a = generate(SMALL)
    b = shift(SMALL, ShiftSpec())
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_risk_shift_raises_default_rate():
    base = generate(SMALL)
    shifted = shift(SMALL, ShiftSpec(mean_shift={0: 1.0}))
    assert shifted.default_rate() > base.default_rate()


def test_minority_targeted_shift_raises_disparity_of_first_best_model():
    def disparity(ds):
        s = _true_logit(SMALL, ds.X)
        m = ds.group("minority").astype(bool)
        return s[m].mean() - s[~m].mean()

    base = generate(SMALL)
    shifted = shift(SMALL, ShiftSpec(mean_shift={0: 1.0, 2: 1.0}, group_only=True))
    assert disparity(shifted) > disparity(base)
    m = shifted.group("minority").astype(bool)
    assert shifted.y[m].mean() > base.y[base.group("minority").astype(bool)].mean()


def test_model_shift_changes_outcomes_only():
    base = generate(SMALL)
    shifted = shift(SMALL, ShiftSpec(coef_shift={0: 1.0}))
    np.testing.assert_array_equal(base.X, shifted.X)
    assert not np.array_equal(base.y, shifted.y)


def test_save_load_roundtrip(tmp_path):
    ds = generate(DGPConfig(n_rows=200, seed=9))
    train, _ = split(ds)
    save_dataset(train, tmp_path / "train.csv", DGPConfig(n_rows=200, seed=9))
    back = load_dataset(tmp_path / "train.csv")
    np.testing.assert_array_equal(back.X, train.X)
    np.testing.assert_array_equal(back.y, train.y)
    for g in train.groups:
        np.testing.assert_array_equal(back.groups[g], train.groups[g])
    np.testing.assert_array_equal(back.standardizer.mean, train.standardizer.mean)
    assert back.column_names == train.column_names
    assert back.meta["config_hash"] == DGPConfig(n_rows=200, seed=9).config_hash()
