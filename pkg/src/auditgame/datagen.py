"""Synthetic credit files: covariates, minority/subprime labels and defaults.

Covariates come from a Gaussian copula with block-equicorrelated latent
normals; minority status shifts the means of a set of group-loaded columns,
and a few columns get skewed marginals.  Default follows a logistic model
with optional pairwise interactions; the intercept is solved so that the
realised default rate hits the configured base rate.  Subprime marks the
worst ``subprime_share`` of a latent risk index built from its own columns.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

GROUP_NAMES = ("minority", "subprime")


def _default_coefs() -> list[float]:
    coefs = np.zeros(50)
    coefs[0:7] = [0.7, -0.7, 0.7, 0.6, -0.6, 0.6, 0.5]  # pure default predictors
    coefs[7:10] = [0.15, -0.1, 0.1]
    coefs[10:13] = 0.6  # subprime index, strong
    coefs[13:20] = 0.2  # subprime index, weak
    coefs[20] = 0.5  # minority-loaded, strong
    coefs[21:30] = 0.1  # minority-loaded, weak
    coefs[30:40] = 0.05
    return coefs.tolist()


def _default_interactions() -> list[tuple[int, int, float]]:
    return [(0, 1, 0.8), (2, 3, -0.8), (4, 5, 0.8), (0, 10, 0.7), (6, 11, -0.7), (3, 20, 0.7), (1, 21, 0.7), (5, 12, -0.7)]


@dataclass(frozen=True)
class ShiftSpec:
    """Deployment shift: covariate mean shifts (in latent sd units) and/or
    coefficient shifts.  ``group_only`` restricts mean shifts to minority rows."""

    mean_shift: dict[int, float] = field(default_factory=dict)
    coef_shift: dict[int, float] = field(default_factory=dict)
    group_only: bool = False

    def is_null(self) -> bool:
        return not any(self.mean_shift.values()) and not any(self.coef_shift.values())


@dataclass(frozen=True)
class DGPConfig:
    n_rows: int = 40_000
    n_cols: int = 50
    coefs: tuple[float, ...] = tuple(_default_coefs())
    minority_share: float = 0.3
    minority_loading: dict[int, float] = field(
        default_factory=lambda: {j: 0.8 for j in range(20, 30)}
    )
    subprime_cols: tuple[int, ...] = tuple(range(10, 20))
    subprime_share: float = 0.12
    subprime_noise: float = 0.5
    interactions: tuple[tuple[int, int, float], ...] = tuple(_default_interactions())
    base_rate: float = 0.15
    block_size: int = 10
    block_corr: float = 0.25
    skewed_cols: tuple[int, ...] = tuple(range(40, 50))
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    seed: int = 0

    def __post_init__(self):
        if self.n_rows < 10 or self.n_cols < 1:
            raise ValueError("need at least 10 rows and one column")
        if len(self.coefs) != self.n_cols:
            raise ValueError(f"coefs has length {len(self.coefs)}, expected n_cols={self.n_cols}")
        if not 0.01 < self.base_rate < 0.5:
            raise ValueError("base_rate must lie in (0.01, 0.5)")
        for share, name in ((self.minority_share, "minority_share"), (self.subprime_share, "subprime_share")):
            if not 0.01 <= share <= 0.99:
                raise ValueError(f"{name} must lie in [0.01, 0.99]")
        cols = set(range(self.n_cols))
        for i, j, _ in self.interactions:
            if i not in cols or j not in cols:
                raise ValueError(f"interaction ({i}, {j}) references a missing column")
        for name, idx in (
            ("minority_loading", self.minority_loading.keys()),
            ("subprime_cols", self.subprime_cols),
            ("skewed_cols", self.skewed_cols),
            ("shift.mean_shift", self.shift.mean_shift.keys()),
            ("shift.coef_shift", self.shift.coef_shift.keys()),
        ):
            bad = [int(j) for j in idx if int(j) not in cols]
            if bad:
                raise ValueError(f"{name} references missing columns {bad}")
        if not 0 <= self.block_corr < 1:
            raise ValueError("block_corr must lie in [0, 1)")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["minority_loading"] = {str(k): v for k, v in self.minority_loading.items()}
        doc["shift"] = {
            "mean_shift": {str(k): v for k, v in self.shift.mean_shift.items()},
            "coef_shift": {str(k): v for k, v in self.shift.coef_shift.items()},
            "group_only": self.shift.group_only,
        }
        doc["interactions"] = [list(t) for t in self.interactions]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DGPConfig":
        doc = dict(doc)
        if "coefs" in doc:
            doc["coefs"] = tuple(float(c) for c in doc["coefs"])
        if "minority_loading" in doc:
            doc["minority_loading"] = {int(k): float(v) for k, v in doc["minority_loading"].items()}
        for key in ("subprime_cols", "skewed_cols"):
            if key in doc:
                doc[key] = tuple(int(c) for c in doc[key])
        if "interactions" in doc:
            doc["interactions"] = tuple((int(i), int(j), float(c)) for i, j, c in doc["interactions"])
        if "shift" in doc:
            s = doc["shift"]
            doc["shift"] = ShiftSpec(
                {int(k): float(v) for k, v in s.get("mean_shift", {}).items()},
                {int(k): float(v) for k, v in s.get("coef_shift", {}).items()},
                bool(s.get("group_only", False)),
            )
        return cls(**doc)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        return cls(X.mean(axis=0), scale)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    groups: dict[str, np.ndarray]
    column_names: list[str]
    standardizer: Standardizer | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            self.X[idx],
            self.y[idx],
            {k: v[idx] for k, v in self.groups.items()},
            list(self.column_names),
            self.standardizer,
            dict(self.meta),
        )

    def group(self, name: str) -> np.ndarray:
        if name not in self.groups:
            raise KeyError(f"unknown group {name!r}; have {sorted(self.groups)}")
        return self.groups[name]

    def default_rate(self) -> float:
        return float(self.y.mean())


def _latent_cov(config: DGPConfig) -> np.ndarray:
    n = config.n_cols
    cov = np.eye(n)
    for start in range(0, n, config.block_size):
        stop = min(start + config.block_size, n)
        block = np.full((stop - start, stop - start), config.block_corr)
        np.fill_diagonal(block, 1.0)
        cov[start:stop, start:stop] = block
    return cov


def _raw_covariates(config: DGPConfig, rng: np.random.Generator, shift: ShiftSpec):
    n, d = config.n_rows, config.n_cols
    minority = (rng.random(n) < config.minority_share).astype(np.int8)
    chol = np.linalg.cholesky(_latent_cov(config))
    Z = rng.standard_normal((n, d)) @ chol.T
    for j, load in config.minority_loading.items():
        Z[:, j] += load * minority
    for j, delta in shift.mean_shift.items():
        Z[:, j] += delta * (minority if shift.group_only else 1.0)
    X = Z.copy()
    for j in config.skewed_cols:
        X[:, j] = np.exp(0.5 * Z[:, j])
    return X, Z, minority


def _linear_index(config: DGPConfig, Z: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    coefs = np.asarray(config.coefs, dtype=float).copy()
    for j, delta in shift.coef_shift.items():
        coefs[j] += delta
    eta = Z @ coefs
    for i, j, c in config.interactions:
        eta = eta + c * Z[:, i] * Z[:, j]
    return eta


def _solve_intercept(eta: np.ndarray, rate: float) -> float:
    f = lambda b: float(expit(eta + b).mean()) - rate
    lo, hi = -50.0, 50.0
    return float(brentq(f, lo, hi, xtol=1e-12))


def generate(config: DGPConfig, intercept: float | None = None, shift: ShiftSpec | None = None) -> Dataset:
    """Draw a dataset.  Covariates are returned unstandardised; ``split`` fits
    the standardisation on the training part."""
    shift = config.shift if shift is None else shift
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    X, Z, minority = _raw_covariates(config, rng, shift)
    eta = _linear_index(config, Z, shift)
    # the intercept is calibrated on the unshifted population, so shifts move the rate
    if intercept is None:
        base = ShiftSpec() if not shift.is_null() else shift
        if not shift.is_null():
            rng_b = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
            _, Z_b, _ = _raw_covariates(config, rng_b, base)
            intercept = _solve_intercept(_linear_index(config, Z_b, base), config.base_rate)
        else:
            intercept = _solve_intercept(eta, config.base_rate)
    prob = expit(eta + intercept)
    rng_y = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    y = (rng_y.random(config.n_rows) < prob).astype(np.int8)

    rng_s = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    sub_cols = list(config.subprime_cols)
    risk = Z[:, sub_cols].sum(axis=1) / np.sqrt(len(sub_cols)) + config.subprime_noise * rng_s.standard_normal(
        config.n_rows
    )
    cut = np.quantile(risk, 1.0 - config.subprime_share)
    if not shift.is_null():
        rng_b = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        _, Z_b, _ = _raw_covariates(config, rng_b, ShiftSpec())
        rng_s = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        risk_b = Z_b[:, sub_cols].sum(axis=1) / np.sqrt(len(sub_cols)) + config.subprime_noise * rng_s.standard_normal(
            config.n_rows
        )
        cut = np.quantile(risk_b, 1.0 - config.subprime_share)
    subprime = (risk > cut).astype(np.int8)

    names = [f"x{j:02d}" for j in range(config.n_cols)]
    meta = {
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "intercept": intercept,
        "mean_probability": float(prob.mean()),
    }
    return Dataset(X, y, {"minority": minority, "subprime": subprime}, names, None, meta)


def split(dataset: Dataset, train_fraction: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Random disjoint split; standardisation fitted on the training rows only."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    raw = dataset.standardizer is None
    std = Standardizer.fit(dataset.X[train_idx]) if raw else dataset.standardizer
    train, test = dataset.subset(train_idx), dataset.subset(test_idx)
    if raw:
        train.X = std.apply(train.X)
        test.X = std.apply(test.X)
    train.standardizer = test.standardizer = std
    return train, test


def shift(config: DGPConfig, shift_spec: ShiftSpec, seed: int | None = None, standardizer: Standardizer | None = None) -> Dataset:
    """Deployment data under a covariate and/or coefficient shift.

    The default intercept is the one of the unshifted population with the same
    seed, so a zero shift reproduces ``generate`` exactly.  Pass the training
    standardiser to put the result on the model's input scale.
    """
    cfg = config if seed is None else replace(config, seed=seed)
    ds = generate(cfg, shift=shift_spec)
    if standardizer is not None:
        ds.X = standardizer.apply(ds.X)
        ds.standardizer = standardizer
    ds.meta["shift"] = {
        "mean_shift": {str(k): v for k, v in shift_spec.mean_shift.items()},
        "coef_shift": {str(k): v for k, v in shift_spec.coef_shift.items()},
        "group_only": shift_spec.group_only,
    }
    return ds


def save_dataset(ds: Dataset, path: str | Path, config: DGPConfig | None = None) -> None:
    """CSV with 17 significant digits plus a JSON sidecar describing it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ds.column_names) + ["default"] + list(ds.groups))
        groups = [ds.groups[g] for g in ds.groups]
        for i in range(len(ds)):
            row = [format(v, ".17g") for v in ds.X[i]]
            row.append(str(int(ds.y[i])))
            row.extend(str(int(g[i])) for g in groups)
            writer.writerow(row)
    sidecar = {
        "columns": list(ds.column_names),
        "outcome": "default",
        "groups": list(ds.groups),
        "n_rows": len(ds),
        "meta": ds.meta,
    }
    if config is not None:
        sidecar["config"] = config.to_dict()
    if ds.standardizer is not None:
        sidecar["standardizer"] = {
            "mean": ds.standardizer.mean.tolist(),
            "scale": ds.standardizer.scale.tolist(),
        }
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        side = json.load(fh)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ncol = len(side["columns"])
    groups = {g: data[:, ncol + 1 + i].astype(np.int8) for i, g in enumerate(side["groups"])}
    std = None
    if "standardizer" in side:
        std = Standardizer(np.asarray(side["standardizer"]["mean"]), np.asarray(side["standardizer"]["scale"]))
    return Dataset(data[:, :ncol], data[:, ncol].astype(np.int8), groups, side["columns"], std, side.get("meta", {}))
