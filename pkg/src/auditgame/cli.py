"""Command line front end.

Every subcommand builds an ``ExperimentConfig`` and hands it to ``run``, which
validates it, writes CSV/JSON outputs into the configured directory and
records a manifest.  ``auditgame run --config FILE`` accepts either a config
or a manifest written by an earlier run, so any experiment can be replayed.

Exit codes: 0 success, 1 invalid input or failed comparison, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
import scipy

import auditgame
from auditgame import closed_form as cf
from auditgame import game_engine as ge
from auditgame.datagen import DGPConfig, ShiftSpec, generate, load_dataset, save_dataset, shift, split
from auditgame.state_model import load_distribution, misalignment_moments
from auditgame.train_audit.experiment import (
    REGIMES,
    CalibrationError,
    EmpiricalConfig,
    coefficient_table,
    ordering_holds,
    run_regimes,
    write_coefficient_csv,
)
from auditgame.train_audit.metrics import MetricsReport
from auditgame.train_audit.optim import TrainingDivergence

KINDS = (
    "theory-closed-form",
    "theory-mc",
    "theory-conditions",
    "theory-explainer",
    "data-gen",
    "data-shift",
    "train-regimes",
    "report",
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        self.source, self.line = source, line
        where = f"{source}:{line}: " if source and line else (f"{source}: " if source else "")
        super().__init__(where + message)


class NumericFailure(RuntimeError):
    pass


# -- schema -----------------------------------------------------------------------------

_num = {"type": "number"}
_int0 = {"type": "integer", "minimum": 0}
_path = {"type": "string", "minLength": 1}
_scenario = {"enum": [s.value for s in cf.Scenario]}
_twovar = {"type": "object"}  # checked by TwoVarParams itself

_PARAMS = {
    "theory-closed-form": {
        "type": "object",
        "properties": {
            "two_var": _twovar,
            "scenarios": {"type": "array", "items": _scenario, "minItems": 1},
            "baseline": {"enum": ["first_best", "absolute", "stated"]},
        },
        "additionalProperties": False,
    },
    "theory-mc": {
        "type": "object",
        "properties": {
            "two_var": _twovar,
            "scenarios": {"type": "array", "items": _scenario, "minItems": 1},
            "baseline": {"enum": ["first_best", "absolute"]},
            "distribution": _path,
            "regimes": {"type": "array", "items": _path},
            "n_draws": {"type": "integer", "minimum": 100},
        },
        "additionalProperties": False,
    },
    "theory-conditions": {
        "type": "object",
        "properties": {
            "distribution": _path,
            "two_var": _twovar,
            "scenario": _scenario,
            "k": _int0,
            "n_samples": {"type": "integer", "minimum": 100},
            "n_random": _int0,
            "exact": {"type": "boolean"},
        },
        "required": ["k"],
        "additionalProperties": False,
    },
    "theory-explainer": {
        "type": "object",
        "properties": {
            "distribution": _path,
            "two_var": _twovar,
            "scenario": _scenario,
            "k": {"type": "integer", "minimum": 1},
            "kind": {"enum": ["prediction", "targeted"]},
            "centered": {"type": "boolean"},
            "n_samples": {"type": "integer", "minimum": 100},
        },
        "required": ["k"],
        "additionalProperties": False,
    },
    "data-gen": {
        "type": "object",
        "properties": {"dgp": {"type": "object"}, "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        "additionalProperties": False,
    },
    "data-shift": {
        "type": "object",
        "properties": {
            "dgp": {"type": "object"},
            "shift": {
                "type": "object",
                "properties": {
                    "mean_shift": {"type": "object", "additionalProperties": _num},
                    "coef_shift": {"type": "object", "additionalProperties": _num},
                    "group_only": {"type": "boolean"},
                },
                "additionalProperties": False,
            },
            "reference": _path,
        },
        "required": ["shift"],
        "additionalProperties": False,
    },
    "train-regimes": {
        "type": "object",
        "properties": {
            "data": _path,
            "dgp": {"type": "object"},
            "deploy": _path,
            "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "cases": {"type": "array", "items": {"enum": ["di", "subprime"]}, "minItems": 1},
            "archs": {"type": "array", "items": {"enum": ["mlp", "logit", "logistic"]}, "minItems": 1},
            "regimes": {"type": "array", "items": {"enum": list(REGIMES)}, "minItems": 1},
            "lambda": {"type": "number", "minimum": 0},
            "eta": {"type": "number", "minimum": 0},
            "k_explainer": {"type": "integer", "minimum": 1},
            "logit_n_cols": {"type": "integer", "minimum": 1},
            "nn": {"type": "object"},
            "logit": {"type": "object"},
            "nn_explainer": {"type": "object"},
            "target_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "tolerance": {"type": "number", "exclusiveMinimum": 0},
        },
        "additionalProperties": False,
    },
    "report": {
        "type": "object",
        "properties": {
            "a": _path,
            "b": _path,
            "atol": {"type": "number", "minimum": 0},
            "rtol": {"type": "number", "minimum": 0},
            "se_multiple": {"type": "number", "exclusiveMinimum": 0},
            "se_column": {"type": "string"},
            "column_map": {"type": "object", "additionalProperties": {"type": "string"}},
            "ordering": {"type": "boolean"},
        },
        "required": ["a"],
        "additionalProperties": False,
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": list(KINDS)},
        "seed": _int0,
        "output_dir": _path,
        "params": {"type": "object"},
    },
    "required": ["kind", "seed", "output_dir"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": k}}}, "then": {"properties": {"params": s}}}
        for k, s in _PARAMS.items()
    ],
}


def _locate(text: str, path) -> int | None:
    """Best-effort line number of a JSON path: follow the keys through the text."""
    pos, line = 0, None
    for part in path:
        if isinstance(part, int):
            continue
        hit = text.find(json.dumps(part), pos)
        if hit < 0:
            break
        pos = hit
        line = text.count("\n", 0, hit) + 1
    return line


@dataclass
class ExperimentConfig:
    kind: str
    seed: int
    output_dir: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "output_dir": self.output_dir, "params": self.params}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict, source: str | None = None, text: str | None = None) -> "ExperimentConfig":
        validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            err = min(errors, key=lambda e: -len(e.absolute_path))
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            line = _locate(text, err.absolute_path) if text else None
            raise ConfigError(f"{where}: {err.message}", source, line)
        cfg = cls(doc["kind"], int(doc["seed"]), doc["output_dir"], dict(doc.get("params", {})))
        cfg._check_inputs(source)
        return cfg

    def _check_inputs(self, source=None) -> None:
        for key in ("distribution", "data", "deploy", "reference", "a", "b"):
            p = self.params.get(key)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"params/{key}: input {p!r} does not exist", source)
        for p in self.params.get("regimes", []) if self.kind == "theory-mc" else []:
            if not Path(p).exists():
                raise ConfigError(f"params/regimes: input {p!r} does not exist", source)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config (or a manifest holding one) with line-anchored errors."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, path, exc.lineno) from exc
    if isinstance(doc, dict) and "config" in doc and "config_hash" in doc:
        doc = doc["config"]
        text = json.dumps(doc, indent=2)
    return ExperimentConfig.from_dict(doc, path, text)


# -- output handling --------------------------------------------------------------------


class OutputDir:
    """All writes of an experiment go through here and stay inside ``root``."""

    def __init__(self, root: str | Path):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if self.root != p and self.root not in p.parents:
            raise ConfigError(f"output {name!r} escapes {self.root}")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return "" if v is None else str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serialisable: {type(o)}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- experiment kinds -------------------------------------------------------------------


def _two_var(params: dict) -> cf.TwoVarParams:
    try:
        return cf.TwoVarParams.from_dict(params.get("two_var", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params/two_var: {exc}") from exc


def _theory_closed_form(cfg: ExperimentConfig, out: OutputDir) -> dict:
    params = _two_var(cfg.params)
    baseline = cfg.params.get("baseline", "first_best")
    rows = []
    for scenario in cfg.params.get("scenarios", [s.value for s in cf.Scenario]):
        for regime in cf.RegimeName:
            if regime is cf.RegimeName.OUTCOME_AUDIT:
                rows.append({"scenario": scenario, "regime": regime.value, "welfare": math.nan, "note": "no closed form"})
                continue
            try:
                val, note = cf.closed_form_welfare(cf.RegimeTag(regime, scenario), params, baseline), ""
            except ValueError as exc:
                val, note = math.nan, str(exc)
            rows.append({"scenario": scenario, "regime": regime.value, "welfare": val, "note": note})
    write_csv(out.path("closed_form.csv"), ("scenario", "regime", "welfare", "note"), rows)
    return {"rows": len(rows)}


MC_COLUMNS = ("scenario", "regime", "mean_welfare", "std_error", "closed_form", "n_samples", "seed")


def _theory_mc(cfg: ExperimentConfig, out: OutputDir) -> dict:
    n = int(cfg.params.get("n_draws", 100_000))
    rows = []
    if "distribution" in cfg.params:
        dist = load_distribution(cfg.params["distribution"])
        regimes = [ge.load_regime(p) for p in cfg.params.get("regimes", [])] or [ge.PolicyRegime.build(name="NoRegulation")]
        for reg in regimes:
            m, se = ge.expected_welfare(reg, dist, n, cfg.seed)
            rows.append({"scenario": "custom", "regime": reg.name or reg.kind.value, "mean_welfare": m, "std_error": se, "closed_form": None, "n_samples": n, "seed": cfg.seed})
    else:
        params = _two_var(cfg.params)
        baseline = cfg.params.get("baseline", "first_best")
        for scenario in cfg.params.get("scenarios", [s.value for s in cf.Scenario]):
            emb = cf.embed_as_general(params, scenario, absolute=(baseline == "absolute"))
            for name, reg in emb.regimes.items():
                m, se = ge.expected_welfare(reg, emb.dist, n, cfg.seed)
                try:
                    cfv = cf.closed_form_welfare(cf.RegimeTag(name, scenario), params, baseline)
                except ValueError:
                    cfv = None
                rows.append({"scenario": scenario, "regime": name.value, "mean_welfare": m, "std_error": se, "closed_form": cfv, "n_samples": n, "seed": cfg.seed})
    write_csv(out.path("mc_welfare.csv"), MC_COLUMNS, rows)
    return {"rows": len(rows)}


def _theory_dist(cfg: ExperimentConfig):
    if "distribution" in cfg.params:
        return load_distribution(cfg.params["distribution"])
    params = _two_var(cfg.params)
    return cf.embed_as_general(params, cfg.params.get("scenario", "lending")).dist


def _theory_conditions(cfg: ExperimentConfig, out: OutputDir) -> dict:
    dist = _theory_dist(cfg)
    k = int(cfg.params["k"])
    n_samples = int(cfg.params.get("n_samples", 20_000))
    if k > dist.n:
        raise ConfigError(f"params/k: {k} exceeds the dimension {dist.n}")
    mm = misalignment_moments(dist, n_samples, cfg.seed)
    summary = {"k": k, "n": dist.n, "rank_gap": mm.rank_gap, "first_best_achievable": mm.rank_gap <= k}
    if dist.fixed_weights is not None:
        cond = ge.exante_condition(mm.var_w, mm.m2_gap, dist.fixed_weights[1], k)
        summary.update(exante_recommended=cond.recommended, min_var_eig=cond.min_var_eig, gap_eig_k1=cond.gap_eig_k1)
    res = ge.regime_search(
        dist, k, n_samples=n_samples, seed=cfg.seed,
        n_random=int(cfg.params.get("n_random", 0)), exact=bool(cfg.params.get("exact", False)),
    )
    rows = [
        {"label": c.label, "m": c.m, "mean_welfare": c.mean, "std_error": c.std_error, "diff_vs_unrestricted": c.diff_vs_unrestricted, "diff_std_error": c.diff_std_error}
        for c in res.candidates
    ]
    summary["best"] = res.best.label
    write_csv(out.path("regime_search.csv"), ("label", "m", "mean_welfare", "std_error", "diff_vs_unrestricted", "diff_std_error"), rows)
    write_json(out.path("conditions.json"), summary)
    return summary


def _theory_explainer(cfg: ExperimentConfig, out: OutputDir) -> dict:
    dist = _theory_dist(cfg)
    k = int(cfg.params["k"])
    n_samples = int(cfg.params.get("n_samples", 100_000))
    omega = ge.default_omega(dist)
    kind = cfg.params.get("kind", "targeted")
    if kind == "targeted":
        expl = ge.targeted_explainer(dist, omega, k, n_samples, cfg.seed, bool(cfg.params.get("centered", False)))
    else:
        mm = misalignment_moments(dist, n_samples, cfg.seed)
        second = mm.var_w + np.outer(mm.mean_w, mm.mean_w)
        expl = ge.prediction_explainer(second, omega, k)
    regime = ge.resolve_regime(ge.PolicyRegime.build(expl, None, f"{kind}-explainer"), dist)
    ge.save_regime(regime, out.path("explainer_regime.json"))
    rows = [{"row": i, **{f"c{j}": v for j, v in enumerate(r)}} for i, r in enumerate(expl.E)]
    write_csv(out.path("explainer.csv"), ["row"] + [f"c{j}" for j in range(dist.n)], rows)
    return {"kind": kind, "k": k}


def _dgp(cfg: ExperimentConfig) -> DGPConfig:
    doc = dict(cfg.params.get("dgp", {}))
    doc["seed"] = cfg.seed
    try:
        return DGPConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params/dgp: {exc}") from exc


def _data_gen(cfg: ExperimentConfig, out: OutputDir) -> dict:
    dgp = _dgp(cfg)
    train, test = split(generate(dgp), cfg.params.get("train_fraction", 0.5), cfg.seed)
    save_dataset(train, out.path("train.csv"), dgp)
    out.path("train.json")
    save_dataset(test, out.path("test.csv"), dgp)
    out.path("test.json")
    return {"n_train": len(train), "n_test": len(test), "default_rate": train.default_rate(), "config_hash": dgp.config_hash()}


def _data_shift(cfg: ExperimentConfig, out: OutputDir) -> dict:
    dgp = _dgp(cfg)
    s = cfg.params["shift"]
    spec = ShiftSpec(
        {int(k): float(v) for k, v in s.get("mean_shift", {}).items()},
        {int(k): float(v) for k, v in s.get("coef_shift", {}).items()},
        bool(s.get("group_only", False)),
    )
    std = load_dataset(cfg.params["reference"]).standardizer if "reference" in cfg.params else None
    ds = shift(dgp, spec, seed=cfg.seed + 1, standardizer=std)
    save_dataset(ds, out.path("deploy.csv"), dgp)
    out.path("deploy.json")
    return {"n_rows": len(ds), "default_rate": ds.default_rate()}


def _train_regimes(cfg: ExperimentConfig, out: OutputDir) -> dict:
    p = cfg.params
    if "data" in p:
        root = Path(p["data"])
        train, test = load_dataset(root / "train.csv"), load_dataset(root / "test.csv")
    else:
        train, test = split(generate(_dgp(cfg)), p.get("train_fraction", 0.5), cfg.seed)
    deploy = load_dataset(p["deploy"]) if "deploy" in p else None
    archs = tuple(dict.fromkeys("logistic" if a == "logit" else a for a in p.get("archs", ["mlp", "logistic"])))
    base = EmpiricalConfig()
    try:
        nn = replace(base.nn, seed=cfg.seed, **p.get("nn", {}))
        logit = replace(base.logit, seed=cfg.seed, **p.get("logit", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params/nn or params/logit: {exc}") from exc
    econf = EmpiricalConfig(
        nn=nn,
        logit=logit,
        nn_explainer={**base.nn_explainer, **p.get("nn_explainer", {})},
        logit_n_cols=p.get("logit_n_cols", base.logit_n_cols),
        k_explainer=p.get("k_explainer", base.k_explainer),
        eta=p.get("eta", base.eta),
        lambda_fixed=p.get("lambda"),
        target_ratio=p.get("target_ratio", base.target_ratio),
        tolerance=p.get("tolerance", base.tolerance),
        cases=tuple(p.get("cases", ["di", "subprime"])),
        archs=archs,
    )
    run_ = run_regimes(econf, train, test, deploy)
    keep = set(p.get("regimes", REGIMES))
    report = run_.report
    report.rows = [r for r in report.rows if r.regime in keep]
    MetricsReport([r for r in report.rows if r.split == "test"]).write_csv(out.path("metrics.csv"))
    report.write_csv(out.path("metrics_all.csv"))
    coef_rows = [r for r in coefficient_table(run_, train) if r["regime"] in keep]
    write_coefficient_csv(coef_rows, out.path("coefficients.csv"))
    for (case, arch, regime), model in sorted(run_.models.items()):
        if regime in keep:
            model.save(out.path(f"models/{case}_{arch}_{regime}.json"))
    cal = {
        "lambdas": run_.lambdas,
        "calibration_ratio": run_.calibration_ratio,
        "explainer_vars": run_.explainer_vars,
        "logit_cols": report.extras["logit_cols"],
    }
    write_json(out.path("calibration.json"), cal)
    return cal


def compare(report_a, report_b, tolerances: dict | None = None) -> list[dict]:
    """Cell-wise comparison of two CSV reports.

    Rows are matched on their non-numeric columns.  A numeric cell passes when
    ``|a - b| <= atol + rtol |b|``, or within ``se_multiple`` standard errors
    taken from ``se_column`` of either report.  ``column_map`` renames columns
    of ``report_a`` before matching.
    """
    tol = {"atol": 0.0, "rtol": 0.0, "se_multiple": None, "se_column": "std_error", "column_map": {}}
    tol.update(tolerances or {})
    A, B = _read_table(report_a, tol["column_map"]), _read_table(report_b, {})
    se_col = tol["se_column"]
    key_a = [c for c in A["columns"] if c not in A["numeric"] and c != "note"]
    key_b = [c for c in B["columns"] if c not in B["numeric"] and c != "note"]
    keys = [c for c in key_a if c in key_b]
    values = [c for c in A["numeric"] if c in B["numeric"] and c != se_col and c not in ("n_samples", "seed")]
    if not values:
        raise ValueError(f"no common numeric columns between {report_a} and {report_b}")
    index_b = {tuple(r[c] for c in keys): r for r in B["rows"]}
    out = []
    for ra in A["rows"]:
        k = tuple(ra[c] for c in keys)
        rb = index_b.get(k)
        if rb is None and all(math.isnan(float(ra[c])) for c in values):
            continue  # nothing to compare, e.g. a regime without a closed form
        if rb is None:
            raise ValueError(f"row {dict(zip(keys, k))} missing from {report_b}")
        for c in values:
            a, b = float(ra[c]), float(rb[c])
            if math.isnan(a) and math.isnan(b):
                out.append({**dict(zip(keys, k)), "column": c, "a": a, "b": b, "abs_diff": 0.0, "rel_diff": 0.0, "allowed": 0.0, "pass": True})
                continue
            diff = abs(a - b)
            allowed = tol["atol"] + tol["rtol"] * abs(b)
            if tol["se_multiple"] is not None:
                se = max(float(r[se_col]) for r in (ra, rb) if r.get(se_col) not in (None, ""))
                allowed = max(allowed, tol["se_multiple"] * se)
            rel = diff / abs(b) if b != 0 else (0.0 if diff == 0 else math.inf)
            out.append({**dict(zip(keys, k)), "column": c, "a": a, "b": b, "abs_diff": diff, "rel_diff": rel, "allowed": allowed, "pass": bool(diff <= allowed)})
    return out


def _read_table(path, column_map: dict) -> dict:
    with open(path, newline="") as fh:
        rows = [{column_map.get(k, k): v for k, v in r.items()} for r in csv.DictReader(fh)]
    if not rows:
        raise ValueError(f"{path} has no rows")
    columns = list(rows[0])
    numeric = set()
    for c in columns:
        try:
            [float(r[c]) for r in rows if r[c] != ""]
        except ValueError:
            continue
        if any(r[c] != "" for r in rows):
            numeric.add(c)
    # an empty cell in a numeric column reads as NaN
    for r in rows:
        for c in numeric:
            if r[c] == "":
                r[c] = "nan"
    return {"columns": columns, "numeric": numeric, "rows": rows}


def check_ordering(report_path) -> list[dict]:
    """Explainer ordering on every (case, arch) pair of a metrics report."""
    report = MetricsReport.read_csv(report_path)
    split_ = "test" if any(r.split == "test" for r in report.rows) else report.rows[0].split
    pairs = sorted({(r.case, r.arch) for r in report.rows})
    out = []
    for case, arch in pairs:
        ok, info = ordering_holds(report, case, arch, split_)
        g = info["gap_to_regulator"]
        out.append({"case": case, "arch": arch, "split": split_, "lender_gap": g["lender"], "pred_gap": g["pred-explainer"], "targeted_gap": g["targeted-explainer"], "pass": ok})
    return out


def _report(cfg: ExperimentConfig, out: OutputDir) -> dict:
    p = cfg.params
    summary = {}
    ok = True
    if "b" in p:
        tol = {k: p[k] for k in ("atol", "rtol", "se_multiple", "se_column", "column_map") if k in p}
        rows = compare(p["a"], p["b"], tol)
        cols = list(rows[0])
        write_csv(out.path("compare.csv"), cols, rows)
        n_fail = sum(not r["pass"] for r in rows)
        summary["compare"] = {"cells": len(rows), "failed": n_fail}
        ok &= n_fail == 0
    if p.get("ordering"):
        rows = check_ordering(p["a"])
        write_csv(out.path("ordering.csv"), list(rows[0]), rows)
        summary["ordering"] = {f"{r['case']}/{r['arch']}": r["pass"] for r in rows}
        ok &= all(r["pass"] for r in rows)
    if not summary:
        raise ConfigError("report needs params/b or params/ordering")
    summary["pass"] = bool(ok)
    return summary


_HANDLERS = {
    "theory-closed-form": _theory_closed_form,
    "theory-mc": _theory_mc,
    "theory-conditions": _theory_conditions,
    "theory-explainer": _theory_explainer,
    "data-gen": _data_gen,
    "data-shift": _data_shift,
    "train-regimes": _train_regimes,
    "report": _report,
}

_NUMERIC_ERRORS = (TrainingDivergence, CalibrationError, np.linalg.LinAlgError, FloatingPointError, NumericFailure)


def run(config: ExperimentConfig, log=None) -> int:
    """Execute one experiment; returns the exit status."""
    say = log or (lambda msg: print(msg, file=sys.stderr))
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    out = OutputDir(config.output_dir)
    start = time.perf_counter()
    try:
        summary = _HANDLERS[config.kind](config, out)
    except ConfigError as exc:
        say(f"error: {exc}")
        return EXIT_INVALID
    except _NUMERIC_ERRORS as exc:
        say(f"numerical failure in {_origin(exc)}: {exc}")
        return EXIT_NUMERIC
    except (ValueError, KeyError, OSError) as exc:
        say(f"error in {_origin(exc)}: {exc}")
        return EXIT_INVALID
    outputs = {p.relative_to(out.root).as_posix(): _sha256(p) for p in dict.fromkeys(out.written) if p.exists()}
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "versions": {
            "auditgame": auditgame.__version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "wall_time_seconds": time.perf_counter() - start,
        "outputs": outputs,
        "summary": summary,
    }
    write_json(out.path("manifest.json"), manifest)
    if config.kind == "report" and not summary.get("pass", True):
        say("report: comparison failed")
        return EXIT_INVALID
    return EXIT_OK


def _origin(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    for frame in reversed(tb):
        if "auditgame" in frame.filename:
            mod = Path(frame.filename).with_suffix("").parts
            idx = max(i for i, part in enumerate(mod) if part == "auditgame")
            return ".".join(mod[idx:]) + f".{frame.name}"
    return "auditgame"


# -- argument parsing -------------------------------------------------------------------


def _json_arg(value: str):
    """Inline JSON or a path to a JSON file."""
    if Path(value).exists():
        return json.loads(Path(value).read_text())
    try:
        return json.loads(value)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not a file or JSON: {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="auditgame", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="group", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("run", help="run an experiment config or replay a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override the output directory")

    theory = sub.add_parser("theory").add_subparsers(dest="cmd", required=True)
    p = theory.add_parser("closed-form")
    p.add_argument("--params", type=_json_arg, default={}, help="two-variable parameters (file or JSON)")
    p.add_argument("--scenario", action="append", choices=[s.value for s in cf.Scenario])
    p.add_argument("--baseline", default="first_best", choices=["first_best", "absolute", "stated"])
    common(p)
    p = theory.add_parser("mc")
    p.add_argument("--params", type=_json_arg, default=None)
    p.add_argument("--scenario", action="append", choices=[s.value for s in cf.Scenario])
    p.add_argument("--baseline", default="first_best", choices=["first_best", "absolute"])
    p.add_argument("--distribution")
    p.add_argument("--regime", action="append", default=None, help="regime JSON (repeatable)")
    p.add_argument("--draws", type=int, default=100_000)
    common(p)
    for name in ("conditions", "explainer"):
        p = theory.add_parser(name)
        p.add_argument("--distribution")
        p.add_argument("--params", type=_json_arg, default=None)
        p.add_argument("--scenario", choices=[s.value for s in cf.Scenario])
        p.add_argument("--k", type=int, required=True)
        p.add_argument("--samples", type=int, default=None)
        if name == "conditions":
            p.add_argument("--n-random", type=int, default=0)
            p.add_argument("--exact", action="store_true")
        else:
            p.add_argument("--kind", default="targeted", choices=["prediction", "targeted"])
            p.add_argument("--centered", action="store_true")
        common(p)

    data = sub.add_parser("data").add_subparsers(dest="cmd", required=True)
    p = data.add_parser("generate")
    p.add_argument("--dgp", type=_json_arg, default={}, help="DGP overrides (file or JSON)")
    p.add_argument("--train-fraction", type=float, default=0.5)
    common(p)
    p = data.add_parser("shift")
    p.add_argument("--dgp", type=_json_arg, default={})
    p.add_argument("--shift", type=_json_arg, required=True)
    p.add_argument("--reference", help="dataset CSV whose standardiser to reuse")
    common(p)

    p = sub.add_parser("train")
    p.add_argument("--case", action="append", choices=["di", "subprime"])
    p.add_argument("--arch", action="append", choices=["logit", "mlp"])
    p.add_argument("--regime", action="append", choices=list(REGIMES))
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed lambda (default: calibrate)")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--k-explainer", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="network epochs")
    p.add_argument("--data", help="directory with train.csv and test.csv (default: generate)")
    p.add_argument("--deploy", help="deployment dataset CSV")
    p.add_argument("--dgp", type=_json_arg, default=None)
    common(p)

    report = sub.add_parser("report").add_subparsers(dest="cmd", required=True)
    p = report.add_parser("compare")
    p.add_argument("a")
    p.add_argument("b", nargs="?")
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--se-multiple", type=float, default=None)
    p.add_argument("--column-map", type=_json_arg, default=None)
    p.add_argument("--ordering", action="store_true", help="check the explainer ordering on a metrics report")
    common(p)
    return ap


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def config_from_args(args) -> ExperimentConfig:
    g, c = args.group, getattr(args, "cmd", None)
    if g == "theory" and c == "closed-form":
        kind, params = "theory-closed-form", _drop_none({"two_var": args.params, "scenarios": args.scenario, "baseline": args.baseline})
    elif g == "theory" and c == "mc":
        kind = "theory-mc"
        params = _drop_none({
            "two_var": args.params, "scenarios": args.scenario, "baseline": args.baseline,
            "distribution": args.distribution, "regimes": args.regime, "n_draws": args.draws,
        })
    elif g == "theory":
        kind = f"theory-{c}"
        params = _drop_none({"distribution": args.distribution, "two_var": args.params, "scenario": args.scenario, "k": args.k, "n_samples": args.samples})
        if c == "conditions":
            params.update(n_random=args.n_random, exact=args.exact)
        else:
            params.update(kind=args.kind, centered=args.centered)
    elif g == "data" and c == "generate":
        kind, params = "data-gen", {"dgp": args.dgp, "train_fraction": args.train_fraction}
    elif g == "data":
        kind, params = "data-shift", _drop_none({"dgp": args.dgp, "shift": args.shift, "reference": args.reference})
    elif g == "train":
        kind = "train-regimes"
        params = _drop_none({
            "cases": args.case, "archs": args.arch, "regimes": args.regime, "lambda": args.lam, "eta": args.eta,
            "k_explainer": args.k_explainer, "data": args.data, "deploy": args.deploy, "dgp": args.dgp,
            "nn": {"epochs": args.epochs} if args.epochs is not None else None,
        })
    else:
        kind = "report"
        params = _drop_none({
            "a": args.a, "b": args.b, "atol": args.atol, "rtol": args.rtol,
            "se_multiple": args.se_multiple, "column_map": args.column_map, "ordering": args.ordering or None,
        })
    return ExperimentConfig.from_dict({"kind": kind, "seed": args.seed, "output_dir": args.out, "params": params}, "command line")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; keep 2 for numeric failures
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    try:
        if args.group == "run":
            cfg = load_config(args.config)
            if args.out:
                cfg = replace(cfg, output_dir=args.out)
        else:
            cfg = config_from_args(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
