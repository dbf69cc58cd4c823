"""Lender / regulator / explainer-constrained fits for the two misalignment cases.

Disparate impact ("di"): the lender fits L, the regulator L + lambda M on
minority status.  Subprime ("subprime"): the lender fits L + lambda M on
subprime status, the regulator L.  The explainer regimes add eta N to the
lender's objective with the regulator's explanation as reference, using
either variables that predict default (prediction explainer) or variables
that predict the group label (targeted explainer).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from auditgame.datagen import Dataset
from auditgame.train_audit.lasso import select_explainer_vars
from auditgame.train_audit.metrics import MetricsReport, delta_log_odds, evaluate, extract_explanation
from auditgame.train_audit.models import PredictorModel
from auditgame.train_audit.objective import TrainSpec
from auditgame.train_audit.optim import fit

CASE_GROUP = {"di": "minority", "subprime": "subprime"}
REGIMES = ("lender", "regulator", "pred-explainer", "targeted-explainer")


class CalibrationError(RuntimeError):
    pass


@dataclass
class Calibration:
    lam: float
    ratio: float
    base_gap: float
    model: PredictorModel
    trace: list[tuple[float, float]] = field(default_factory=list)


def calibrate_lambda(
    base_model: PredictorModel,
    data: Dataset,
    group: str,
    spec: TrainSpec,
    target_ratio: float = 0.5,
    tolerance: float = 0.1,
    lam_start: float = 1.0,
    max_iter: int = 40,
) -> Calibration:
    """Find lambda so that the L + lambda M fit has |gap| = ratio * |base gap|.

    The search runs in log lambda.  Once bracketed it takes secant steps on
    log(1/ratio - 1), which is close to linear in log lambda for quadratic
    penalties, and falls back to bisection when a step leaves the bracket.
    """
    base_gap = delta_log_odds(base_model, data, group)
    if base_gap == 0:
        raise CalibrationError("base disparity is zero")
    lo_band, hi_band = (1 - tolerance) * target_ratio, (1 + tolerance) * target_ratio
    trace: list[tuple[float, float]] = []
    cache: dict[float, tuple[float, PredictorModel]] = {}

    def ratio_at(lam: float) -> tuple[float, PredictorModel]:
        if lam not in cache:
            res = fit(replace(spec, lambda_misalign=lam, misalign_group=group), data)
            r = abs(delta_log_odds(res.model, data, group)) / abs(base_gap)
            cache[lam] = (r, res.model)
            trace.append((lam, r))
        return cache[lam]

    def transform(r: float) -> float:
        r = min(max(r, 1e-9), 1 - 1e-9)
        return math.log(1.0 / r - 1.0)

    goal = transform(target_ratio)
    lo = hi = None  # log lambda with ratio above / below target
    x = math.log(lam_start)
    for _ in range(max_iter):
        lam = math.exp(x)
        r, model = ratio_at(lam)
        if lo_band <= r <= hi_band:
            return Calibration(lam, r, base_gap, model, trace)
        if r > target_ratio:
            lo = x if lo is None else max(lo, x)
        else:
            hi = x if hi is None else min(hi, x)
        if lo is None:
            x = hi - 2.0
        elif hi is None:
            x = lo + 2.0
        else:
            r_lo, r_hi = cache[math.exp(lo)][0], cache[math.exp(hi)][0]
            t_lo, t_hi = transform(r_lo), transform(r_hi)
            cand = lo + (goal - t_lo) * (hi - lo) / (t_hi - t_lo) if t_hi != t_lo else 0.5 * (lo + hi)
            margin = 0.05 * (hi - lo)
            x = cand if lo + margin < cand < hi - margin else 0.5 * (lo + hi)
    raise CalibrationError(f"lambda search did not reach ratio {target_ratio} +- {tolerance}: {trace}")


@dataclass
class EmpiricalConfig:
    nn: TrainSpec = field(
        default_factory=lambda: TrainSpec(step_size=3e-3, batch_size=1024, epochs=40, weight_decay=1e-3, arch="mlp")
    )
    logit: TrainSpec = field(
        default_factory=lambda: TrainSpec(step_size=1e-2, batch_size=None, epochs=300, arch="logistic")
    )
    # explainer-constrained fits: exact full-batch gradients from the lender's fit
    nn_explainer: dict = field(default_factory=lambda: {"batch_size": None, "step_size": 3e-3, "epochs": 200})
    warm_start: bool = True
    logit_n_cols: int = 20
    k_explainer: int = 10
    eta: float = 20.0
    lambda_fixed: float | None = None  # skip calibration when set
    target_ratio: float = 0.5
    tolerance: float = 0.1
    cases: tuple[str, ...] = ("di", "subprime")
    archs: tuple[str, ...] = ("mlp", "logistic")


@dataclass
class RegimeRun:
    report: MetricsReport
    models: dict[tuple[str, str, str], PredictorModel]
    explainer_vars: dict[str, tuple[int, ...]]
    lambdas: dict[str, float]
    calibration_ratio: dict[str, float]
    references: dict[tuple[str, str, str], np.ndarray]


def _arch_spec(config: EmpiricalConfig, arch: str, logit_cols) -> TrainSpec:
    if arch == "mlp":
        return config.nn
    return replace(config.logit, input_cols=tuple(logit_cols))


def run_regimes(
    config: EmpiricalConfig,
    train: Dataset,
    test: Dataset,
    deploy: Dataset | None = None,
    log=None,
) -> RegimeRun:
    """Fit all regimes for each case and architecture and score them."""
    say = log or (lambda msg: None)
    k = config.k_explainer
    J = {"default": select_explainer_vars(train, "default", k)}
    for case in config.cases:
        group = CASE_GROUP[case]
        J[group] = select_explainer_vars(train, group, k)
    logit_cols = select_explainer_vars(train, "default", config.logit_n_cols)
    say(f"explainer variables: {J}; logistic inputs: {logit_cols}")

    models: dict[tuple[str, str, str], PredictorModel] = {}
    refs: dict[tuple[str, str, str], np.ndarray] = {}
    lambdas: dict[str, float] = {}
    ratios: dict[str, float] = {}

    # the plain fit serves as DI lender and subprime regulator
    plain = {}
    for arch in config.archs:
        plain[arch] = fit(_arch_spec(config, arch, logit_cols), train).model
        say(f"fitted plain {arch}")

    for case in config.cases:
        group = CASE_GROUP[case]
        nn_spec = _arch_spec(config, "mlp", logit_cols)
        base = plain["mlp"] if "mlp" in plain else fit(nn_spec, train).model
        if config.lambda_fixed is None:
            cal = calibrate_lambda(base, train, group, nn_spec, config.target_ratio, config.tolerance)
            say(f"{case}: lambda={cal.lam:.6g} ratio={cal.ratio:.4f} after {len(cal.trace)} fits")
        else:
            lam = config.lambda_fixed
            model = fit(replace(nn_spec, lambda_misalign=lam, misalign_group=group), train).model if "mlp" in config.archs else base
            r = abs(delta_log_odds(model, train, group)) / abs(delta_log_odds(base, train, group))
            cal = Calibration(lam, r, delta_log_odds(base, train, group), model, [(lam, r)])
        lambdas[case], ratios[case] = cal.lam, cal.ratio

        for arch in config.archs:
            spec = _arch_spec(config, arch, logit_cols)
            penalised = cal.model if arch == "mlp" else fit(replace(spec, lambda_misalign=cal.lam, misalign_group=group), train).model
            if case == "di":
                lender, regulator = plain[arch], penalised
                lender_spec = spec
            else:
                lender, regulator = penalised, plain[arch]
                lender_spec = replace(spec, lambda_misalign=cal.lam, misalign_group=group)
            models[(case, arch, "lender")] = lender
            models[(case, arch, "regulator")] = regulator
            for regime, vars_key in (("pred-explainer", "default"), ("targeted-explainer", group)):
                Jr = J[vars_key]
                ref = extract_explanation(regulator, train, Jr)
                refs[(case, arch, regime)] = ref
                constrained = replace(
                    lender_spec,
                    eta_explainer=config.eta,
                    explainer_vars=tuple(Jr),
                    reference_coeffs=tuple(float(v) for v in ref),
                    **(config.nn_explainer if arch == "mlp" else {}),
                )
                init = lender if config.warm_start else None
                models[(case, arch, regime)] = fit(constrained, train, init=init).model
            say(f"{case}/{arch}: fitted four regimes")

    report = MetricsReport()
    splits = [("train", train), ("test", test)] + ([("deploy", deploy)] if deploy is not None else [])
    for (case, arch, regime), model in models.items():
        for name, data in splits:
            report.rows.append(evaluate(model, data, CASE_GROUP[case], case, arch, regime, name))
    report.extras = {"lambdas": lambdas, "calibration_ratio": ratios, "explainer_vars": J, "logit_cols": logit_cols}
    return RegimeRun(report, models, J, lambdas, ratios, refs)


def ordering_holds(report: MetricsReport, case: str, arch: str = "mlp", split: str = "test") -> tuple[bool, dict]:
    """|targeted - regulator| <= |pred - regulator| <= |lender - regulator| in Delta log odds."""
    d = {r: report.find(case, arch, r, split).delta_log_odds for r in REGIMES}
    gaps = {r: abs(d[r] - d["regulator"]) for r in ("lender", "pred-explainer", "targeted-explainer")}
    ok = gaps["targeted-explainer"] <= gaps["pred-explainer"] <= gaps["lender"]
    return ok, {"delta": d, "gap_to_regulator": gaps}


COEF_COLUMNS = ("case", "arch", "explainer", "regime", "term", "coefficient")


def coefficient_table(run: RegimeRun, data: Dataset, column_names=None) -> list[dict]:
    """Explanation coefficients of every fitted model under both explainers,
    plus the underlying coefficients of logistic models."""
    names = column_names or data.column_names
    rows = []
    for (case, arch, regime), model in run.models.items():
        group = CASE_GROUP[case]
        for label, key in (("prediction", "default"), ("targeted", group)):
            Jr = run.explainer_vars[key]
            beta = extract_explanation(model, data, Jr)
            terms = ["intercept"] + [names[j] for j in Jr]
            for t, b in zip(terms, beta):
                rows.append({"case": case, "arch": arch, "explainer": label, "regime": regime, "term": t, "coefficient": float(b)})
        if model.arch == "logistic":
            (W, b), = model.unpack()
            cols = model.input_cols or tuple(range(model.n_in))
            rows.append({"case": case, "arch": arch, "explainer": "model", "regime": regime, "term": "intercept", "coefficient": float(b[0])})
            for j, w in zip(cols, W[:, 0]):
                rows.append({"case": case, "arch": arch, "explainer": "model", "regime": regime, "term": names[j], "coefficient": float(w)})
    return rows


def write_coefficient_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COEF_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c != "coefficient" else format(r[c], ".17g") for c in COEF_COLUMNS])
