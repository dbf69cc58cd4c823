import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from auditgame.datagen import Dataset, DGPConfig, generate, split
from auditgame.train_audit import (
    CalibrationError,
    EmpiricalConfig,
    MetricsReport,
    MetricsRow,
    Objective,
    PredictorModel,
    TrainingDivergence,
    TrainSpec,
    auc,
    calibrate_lambda,
    delta_log_odds,
    explainer_penalty,
    extract_explanation,
    fit,
    gradient,
    init_model,
    log_loss,
    misalignment_term,
    objective_value,
    predictive_loss,
    run_regimes,
    select_explainer_vars,
    select_support,
)
from oracles import central_difference, logistic_nll, max_relative_error, pairwise_auc


def _dataset(X, y, g=None, s=None):
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    g = np.arange(n) % 2 if g is None else g
    s = (np.arange(n) % 3 == 0) if s is None else s
    return Dataset(X, np.asarray(y, dtype=np.int8), {"minority": np.asarray(g, np.int8), "subprime": np.asarray(s, np.int8)}, [f"x{j}" for j in range(X.shape[1])])


def _random_data(seed, n=300, d=5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    g = (rng.random(n) < 0.4).astype(int)
    X[:, 0] += 0.8 * g
    y = (rng.random(n) < 1 / (1 + np.exp(-(X[:, 0] - X[:, 1] + 0.5 * X[:, 2] * X[:, 3])))).astype(int)
    return _dataset(X, y, g)


def _logistic(coefs, intercept, cols=None):
    coefs = np.asarray(coefs, dtype=float)
    return PredictorModel("logistic", coefs.size, np.concatenate([coefs, [intercept]]), input_cols=cols)


@pytest.fixture(scope="module")
def small_credit():
    ds = generate(DGPConfig(n_rows=8000, seed=11))
    return split(ds, 0.5, seed=0)


# -- losses ----------------------------------------------------------------------------


def test_log_loss_examples():
    assert log_loss([1, 0], [0.8, 0.4]) == pytest.approx(-0.5 * (math.log(0.8) + math.log(0.6)), abs=1e-12)
    assert log_loss([1, 0], [0.8, 0.4]) == pytest.approx(0.3670, abs=5e-5)
    assert log_loss([1, 0, 1], [0.5] * 3) == pytest.approx(math.log(2))
    assert log_loss([1, 0], [1.0, 0.0]) <= 1e-10


def test_predictive_loss_matches_oracle():
    data = _random_data(0)
    model = init_model("mlp", 5, seed=1, hidden=(8, 8))
    assert predictive_loss(model, data) == pytest.approx(logistic_nll(data.y, model.predict_proba(data.X)), abs=1e-10)


def test_probabilities_stay_clamped():
    model = _logistic([1e6], 0.0)
    p = model.predict_proba(np.array([[-1.0], [1.0]]))
    assert np.all(p >= 1e-12) and np.all(p <= 1 - 1e-12)


def test_misalignment_examples():
    data = _dataset([[1.0], [0.5], [1.0], [0.5]], [1, 0, 0, 1], g=[1, 0, 1, 0])
    model = _logistic([1.0], 0.0)
    assert misalignment_term(model, data) == pytest.approx(0.25, abs=1e-14)
    assert delta_log_odds(model, data) == pytest.approx(0.5, abs=1e-14)
    flat = _logistic([0.0], 0.7)
    assert misalignment_term(flat, data) == 0.0 and delta_log_odds(flat, data) == 0.0
    sym = _dataset([[1.0], [1.0], [0.5], [0.5]], [1, 0, 0, 1], g=[1, 0, 1, 0])
    assert misalignment_term(model, sym) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(ValueError, match="both groups"):
        misalignment_term(model, _dataset([[1.0], [2.0]], [0, 1], g=[1, 1]))


@given(st.integers(0, 10_000))
def test_delta_squared_equals_misalignment(seed):
    data = _random_data(seed, n=100)
    model = init_model("mlp", 5, seed=seed, hidden=(6,))
    assert delta_log_odds(model, data) ** 2 == pytest.approx(misalignment_term(model, data), abs=1e-12)


# -- explanations ----------------------------------------------------------------------


@given(st.integers(0, 10_000))
def test_explanation_recovers_linear_model(seed):
    rng = np.random.default_rng(seed)
    data = _random_data(seed, n=200, d=6)
    J = (1, 3, 4)
    coefs, b = rng.normal(size=3), rng.normal()
    model = _logistic(coefs, b, cols=J)
    beta = extract_explanation(model, data, J)
    np.testing.assert_allclose(beta, np.concatenate([[b], coefs]), atol=1e-8)
    assert explainer_penalty(model, data, J, beta) <= 1e-20
    ref = rng.normal(size=4)
    expected = np.sum((np.concatenate([[b], coefs]) - ref) ** 2)
    assert explainer_penalty(model, data, J, ref) == pytest.approx(expected, abs=1e-10)
    assert explainer_penalty(model, data, J, np.zeros(4)) == pytest.approx(b * b + coefs @ coefs, abs=1e-10)


def test_constant_model_explanation():
    data = _random_data(1)
    beta = extract_explanation(_logistic(np.zeros(5), -1.3), data, (0, 2))
    np.testing.assert_allclose(beta, [-1.3, 0, 0], atol=1e-12)


def test_zero_penalty_determines_ten_variable_logit_model():
    rng = np.random.default_rng(2)
    data = _random_data(2, n=500, d=12)
    J = tuple(range(10))
    model = _logistic(rng.normal(size=10), 0.3, cols=J)
    beta = extract_explanation(model, data, J)
    clone = _logistic(beta[1:], beta[0], cols=J)
    assert explainer_penalty(clone, data, J, beta) <= 1e-20
    np.testing.assert_allclose(clone.logits(data.X), model.logits(data.X), atol=1e-10)


def test_explanation_design_errors():
    X = np.random.default_rng(0).standard_normal((50, 3))
    X[:, 2] = X[:, 1]
    data = _dataset(X, np.arange(50) % 2)
    with pytest.raises(ValueError, match="rank deficient"):
        extract_explanation(_logistic(np.zeros(3), 0), data, (1, 2))
    with pytest.raises(ValueError):
        extract_explanation(_logistic(np.zeros(3), 0), data, (5,))


# -- AUC -------------------------------------------------------------------------------


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auc([0.9, 0.8, 0.3], [1, 0, 1]) == pytest.approx(0.5)
    assert auc([0.4] * 5, [1, 0, 1, 0, 0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


@given(st.integers(0, 10_000))
def test_auc_matches_oracles_and_is_rank_invariant(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 300))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = np.round(rng.normal(size=n) + y, 1)  # rounding creates ties
    a = auc(s, y)
    assert a == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert a == pytest.approx(pairwise_auc(s, y), abs=1e-12)
    assert auc(np.exp(3 * s) + 7, y) == pytest.approx(a, abs=1e-12)


# -- gradients -------------------------------------------------------------------------


def _penalised_spec(data, arch, **kw):
    J = (0, 2)
    return TrainSpec(lambda_misalign=0.7, eta_explainer=1.3, explainer_vars=J,
                     reference_coeffs=(0.1, -0.2, 0.3), arch=arch, **kw)


def _fd_check(spec, model, data, tol):
    obj = Objective(spec, model, data)
    analytic = obj.value_and_grad(model.params)[1]
    numeric = central_difference(lambda p: obj.value(p).total, model.params.copy(), 1e-5)
    assert max_relative_error(analytic, numeric, floor=1e-6) <= tol
    comps = obj.component_grads(model.params)
    for name, g in comps.items():
        num = central_difference(lambda p: obj.component_values(p)[name], model.params.copy(), 1e-5)
        assert max_relative_error(g, num, floor=1e-6) <= 1e-4, name
    total = comps["L"] + spec.lambda_misalign * comps["M"] + spec.eta_explainer * comps["N"]
    np.testing.assert_allclose(total, analytic, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_logistic_gradient_matches_finite_differences(seed):
    data = _random_data(seed, n=200, d=5)
    model = init_model("logistic", 5, seed=seed).copy(np.random.default_rng(seed).normal(size=6) * 0.5)
    _fd_check(_penalised_spec(data, "logistic"), model, data, 1e-5)


def test_network_gradient_matches_finite_differences():
    data = _random_data(5, n=120, d=10)
    model = init_model("mlp", 10, seed=5, hidden=(40, 40))
    _fd_check(_penalised_spec(data, "mlp"), model, data, 1e-4)


def test_gradient_first_order_taylor():
    data = _random_data(6, n=150, d=5)
    spec = _penalised_spec(data, "mlp", hidden=(8, 8))
    model = init_model("mlp", 5, seed=6, hidden=(8, 8))
    g = gradient(spec, model, data)
    delta = np.random.default_rng(0).standard_normal(model.params.size)
    base = objective_value(spec, model, data)
    for eps in (1e-3, 1e-4):
        change = objective_value(spec, model.copy(model.params + eps * delta), data) - base
        assert abs(change - eps * g @ delta) <= 50 * eps**2 * np.linalg.norm(delta) ** 2


def test_batch_gradient_with_all_rows_equals_full_gradient():
    data = _random_data(7, n=100, d=5)
    spec = _penalised_spec(data, "mlp", hidden=(6,))
    model = init_model("mlp", 5, seed=7, hidden=(6,))
    obj = Objective(spec, model, data)
    stats, full = obj.value_and_grad(model.params)
    np.testing.assert_allclose(obj.batch_grad(model.params, np.arange(100), stats), full, atol=1e-12)


# -- fitting ---------------------------------------------------------------------------


def test_fit_separable_toy():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 2))
    X = X[np.abs(X[:, 0] + X[:, 1]) > 0.5][:200]  # separable with a margin
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    data = _dataset(X, y)
    res = fit(TrainSpec(arch="logistic", step_size=0.1, batch_size=None, epochs=500), data)
    assert predictive_loss(res.model, data) <= 0.05
    assert res.final.total <= res.initial.total


def test_fit_is_deterministic_and_never_worse_than_start():
    data = _random_data(3)
    spec = TrainSpec(arch="mlp", hidden=(8,), epochs=5, batch_size=32, step_size=1e-2, seed=4)
    a, b = fit(spec, data), fit(spec, data)
    np.testing.assert_array_equal(a.model.params, b.model.params)
    assert a.final.total <= a.initial.total
    assert min(a.history) == pytest.approx(a.final.total)


def test_fit_divergence_is_reported():
    data = _random_data(3)
    with pytest.raises(TrainingDivergence, match="epoch"), np.errstate(all="ignore"):
        fit(TrainSpec(arch="mlp", hidden=(4,), epochs=3, batch_size=None, step_size=1e308), data)


def test_large_lambda_shrinks_misalignment(small_credit):
    train, _ = small_credit
    spec = TrainSpec(arch="logistic", batch_size=None, epochs=300, step_size=1e-2)
    base = misalignment_term(fit(spec, train).model, train)
    pen = misalignment_term(fit(replace(spec, lambda_misalign=50.0), train).model, train)
    assert pen <= 0.1 * base


def test_large_eta_matches_reference_explanation(small_credit):
    train, _ = small_credit
    spec = TrainSpec(arch="logistic", batch_size=None, epochs=300, step_size=1e-2)
    regulator = fit(replace(spec, lambda_misalign=5.0), train).model
    J = tuple(range(20, 25))
    ref = extract_explanation(regulator, train, J)
    res = fit(replace(spec, eta_explainer=1000.0, explainer_vars=J, reference_coeffs=tuple(ref)), train)
    assert explainer_penalty(res.model, train, J, ref) <= 1e-3


def test_eta_monotonicity(small_credit):
    train, _ = small_credit
    spec = TrainSpec(arch="logistic", batch_size=None, epochs=200, step_size=1e-2)
    regulator = fit(replace(spec, lambda_misalign=5.0), train).model
    J = tuple(range(20, 25))
    ref = tuple(extract_explanation(regulator, train, J))
    pens = []
    for eta in (0.0, 1.0, 10.0, 100.0):
        model = fit(replace(spec, eta_explainer=eta, explainer_vars=J, reference_coeffs=ref), train).model
        pens.append(explainer_penalty(model, train, J, ref))
    assert all(a >= b for a, b in zip(pens, pens[1:])), pens


# -- LASSO -----------------------------------------------------------------------------


def test_lasso_keeps_perfect_predictor():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((400, 8))
    y = (rng.random(400) < 0.3).astype(int)
    X[:, 5] = (y - y.mean()) / y.std()
    assert select_support(X, y, 1) == (5,)
    # with a perfect separator no second variable ever enters the path
    with pytest.raises(ValueError, match="could not reach"):
        select_support(X, y, 2)


def test_lasso_full_support_and_errors():
    data = _random_data(0, d=5)
    assert select_explainer_vars(data, "default", 5) == (0, 1, 2, 3, 4)
    with pytest.raises(ValueError):
        select_support(data.X, np.zeros(len(data)), 2)
    with pytest.raises(ValueError):
        select_support(data.X, data.y, 0)


def test_lasso_selection_is_deterministic(small_credit):
    train, _ = small_credit
    a = select_explainer_vars(train, "default", 10)
    assert a == select_explainer_vars(train, "default", 10) and len(a) == 10


def test_targeted_selection_recovers_group_loaded_columns():
    cfg = DGPConfig(n_rows=20_000, seed=1)
    train, _ = split(generate(cfg))
    loaded = set(cfg.minority_loading)
    J = select_explainer_vars(train, "minority", len(loaded))
    assert len(loaded & set(J)) >= 0.8 * len(loaded)


# -- calibration -----------------------------------------------------------------------


def test_calibration_limits_and_stopping_rule(small_credit):
    train, _ = small_credit
    spec = TrainSpec(arch="logistic", batch_size=None, epochs=150, step_size=1e-2)
    base = fit(spec, train).model
    gap0 = delta_log_odds(base, train, "minority")
    zero = fit(replace(spec, lambda_misalign=0.0), train).model
    assert delta_log_odds(zero, train, "minority") == pytest.approx(gap0, rel=1e-12)
    huge = fit(replace(spec, lambda_misalign=1e6), train).model
    assert abs(delta_log_odds(huge, train, "minority")) <= 0.05 * abs(gap0)
    cal = calibrate_lambda(base, train, "minority", spec)
    assert 0.45 <= cal.ratio <= 0.55
    post = abs(delta_log_odds(cal.model, train, "minority")) / abs(gap0)
    assert post == pytest.approx(cal.ratio, rel=1e-12)


def test_calibration_rejects_zero_disparity():
    data = _random_data(0)
    with pytest.raises(CalibrationError):
        calibrate_lambda(_logistic(np.zeros(5), 0.0), data, "minority", TrainSpec(arch="logistic"))


# -- regimes and reports ---------------------------------------------------------------


def test_aligned_regimes_coincide(small_credit):
    train, test = small_credit
    cfg = EmpiricalConfig(
        nn=TrainSpec(step_size=3e-3, batch_size=512, epochs=8, weight_decay=1e-3, arch="mlp"),
        logit=TrainSpec(step_size=1e-2, batch_size=None, epochs=100, arch="logistic"),
        nn_explainer={"batch_size": None, "step_size": 3e-3, "epochs": 20},
        eta=0.0,
        lambda_fixed=0.0,
        cases=("di",),
    )
    run = run_regimes(cfg, train, test)
    for arch in ("mlp", "logistic"):
        aucs = [run.report.find("di", arch, r).auc for r in ("lender", "regulator", "pred-explainer", "targeted-explainer")]
        assert max(aucs) - min(aucs) <= 0.005, (arch, aucs)


def test_metrics_row_validation_and_csv_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        MetricsRow("di", "mlp", "lender", "test", 1.5, 0.2, 0.0)
    with pytest.raises(ValueError):
        MetricsRow("di", "mlp", "lender", "test", 0.5, -0.2, 0.0)
    rep = MetricsReport([MetricsRow("di", "mlp", "lender", "test", 0.9, 0.25, 0.123456789012345678)])
    rep.write_csv(tmp_path / "m.csv")
    back = MetricsReport.read_csv(tmp_path / "m.csv")
    assert back.rows == rep.rows
    with pytest.raises(KeyError):
        back.find("di", "mlp", "regulator")


def test_model_json_roundtrip(tmp_path):
    model = init_model("mlp", 4, seed=3, hidden=(5, 3), input_cols=(0, 1, 2, 3))
    model.save(tmp_path / "m.json")
    back = PredictorModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.params, model.params)
    assert back.hidden == model.hidden and back.input_cols == model.input_cols
    with pytest.raises(ValueError):
        PredictorModel("mlp", 4, np.zeros(3))
