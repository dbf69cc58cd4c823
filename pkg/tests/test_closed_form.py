import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from auditgame import game_engine as ge
from auditgame.closed_form import (
    CLOSED_FORM_REGIMES,
    RegimeName,
    RegimeTag,
    Scenario,
    TwoVarParams,
    build_sigma,
    closed_form_welfare,
    embed_as_general,
    random_params,
    welfare_table,
)


def _sigma(s0, s1, s2, s3, check=True):
    return build_sigma(TwoVarParams(sigma0=s0, sigma1=s1, sigma2=s2, sigma3=s3), check_order=check)


def test_sigma_trivial_patterns():
    np.testing.assert_allclose(_sigma(0, 0, 0, 1, check=False), np.eye(4))
    np.testing.assert_allclose(_sigma(1, 0, 0, 0, check=False), np.ones((4, 4)))


def test_sigma_hand_sum():
    S = _sigma(2, 1.2, 1.1, 0.5)
    assert S[0, 0] == pytest.approx(6.90)
    assert S[0, 1] == pytest.approx(5.44)  # cells 1 and 2 share X1 = 0
    assert S[0, 2] == pytest.approx(4 + 1.21)  # cells 1 and 3 share X2 = 0
    assert S[0, 3] == pytest.approx(4.0)
    assert np.allclose(S, S.T) and np.linalg.eigvalsh(S).min() > 0


def test_sigma_ordering_error():
    with pytest.raises(ValueError, match="ordering"):
        _sigma(1, 0.5, 0.6, 0.1)


def test_params_validation():
    with pytest.raises(ValueError):
        TwoVarParams(p=0.5)
    with pytest.raises(ValueError):
        TwoVarParams(p=1.0)
    with pytest.raises(ValueError):
        TwoVarParams.from_dict({"bogus": 1})
    prm = TwoVarParams(p=0.2)
    assert TwoVarParams.from_dict(prm.to_dict()) == prm
    np.testing.assert_allclose(prm.mu, [0.4, 0.1, 0.4, 0.1])


def _coef_var(prm, weights):
    """Variance of a linear combination of (alpha, beta, gamma, delta) under Sigma.

    The cell scores are s = (a, a + g, a + b, a + b + g + d), so the
    coefficients are recovered by inverting that map.
    """
    T = np.array([[1, 0, 0, 0], [1, 0, 1, 0], [1, 1, 0, 0], [1, 1, 1, 1]], dtype=float)
    c = np.linalg.solve(T.T, np.asarray(weights, float))  # c' s = weights' coef
    return float(c @ build_sigma(prm) @ c)


def test_lending_formulas():
    prm = TwoVarParams(delta_overall=0.1, delta_hu=0.2, p=0.3)
    cf = lambda r: closed_form_welfare(RegimeTag(r, "lending"), prm)  # noqa: E731
    assert cf(RegimeName.NO_REGULATION) == pytest.approx(-0.0340, abs=1e-12)
    assert cf(RegimeName.PREDICTION_EXPLAINER) == pytest.approx(-0.0084, abs=1e-12)
    assert cf(RegimeName.TARGETED_EXPLAINER) == 0.0
    p = prm.p
    expected = -(_coef_var(prm, [1, 0.5, p, 0.5 * p]) + p * (1 - p) * _coef_var(prm, [0, 0, 1, 0.5]))
    assert cf(RegimeName.EX_ANTE) == pytest.approx(expected, rel=1e-10)


def test_medical_formulas():
    prm = TwoVarParams(delta_overall=0.3, p=0.2)
    cf = lambda r: closed_form_welfare(RegimeTag(r, "medical"), prm)  # noqa: E731
    assert cf(RegimeName.NO_REGULATION) == pytest.approx(-0.09)
    assert cf(RegimeName.EX_ANTE) == pytest.approx(-_coef_var(prm, [1, 0.5, 0.2, 0.1]), rel=1e-10)
    assert cf(RegimeName.PREDICTION_EXPLAINER) == 0.0 and cf(RegimeName.TARGETED_EXPLAINER) == 0.0


def test_hiring_stated_formulas():
    prm = TwoVarParams(lambda_eq=2.0, p=0.3)
    stated = lambda r: closed_form_welfare(RegimeTag(r, "hiring"), prm, baseline="stated")  # noqa: E731
    p = prm.p
    assert stated(RegimeName.EX_ANTE) == pytest.approx(-p * (1 - p) * _coef_var(prm, [0, 0, 1, 0.5]), rel=1e-10)
    assert stated(RegimeName.NO_REGULATION) == stated(RegimeName.PREDICTION_EXPLAINER) < 0
    assert stated(RegimeName.TARGETED_EXPLAINER) == 0.0


def test_outcome_audit_has_no_closed_form():
    with pytest.raises(ValueError, match="no closed form"):
        closed_form_welfare(RegimeTag(RegimeName.OUTCOME_AUDIT, "lending"), TwoVarParams())
    rows = welfare_table(TwoVarParams())
    assert len(rows) == 3 * len(CLOSED_FORM_REGIMES)


@given(st.integers(0, 10_000))
def test_lending_monotone_in_audit_strength(seed):
    prm = random_params(np.random.default_rng(seed), "lending")
    vals = [abs(closed_form_welfare(RegimeTag(r, "lending"), prm)) for r in (
        RegimeName.NO_REGULATION, RegimeName.PREDICTION_EXPLAINER, RegimeName.TARGETED_EXPLAINER)]
    assert vals[0] >= vals[1] >= vals[2] == 0.0


@pytest.mark.parametrize("scenario", list(Scenario))
def test_aligned_embedding_is_first_best(scenario):
    prm = TwoVarParams(delta_overall=0.0, delta_hu=0.0, lambda_eq=0.0)
    emb = embed_as_general(prm, scenario)
    for regime in (RegimeName.NO_REGULATION, RegimeName.PREDICTION_EXPLAINER, RegimeName.TARGETED_EXPLAINER):
        mean, se = ge.expected_welfare(emb.regimes[regime], emb.dist, 1000, 0)
        assert mean == pytest.approx(0.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)


def test_hiring_without_equality_weight_reduces_to_pure_fit():
    prm = TwoVarParams(lambda_eq=0.0)
    emb = embed_as_general(prm, "hiring")
    for regime in CLOSED_FORM_REGIMES:
        cf = closed_form_welfare(RegimeTag(regime, "hiring"), prm)
        mean, se = ge.expected_welfare(emb.regimes[regime], emb.dist, 20_000, 0)
        assert abs(mean - cf) <= 3 * se + 1e-10
    assert closed_form_welfare(RegimeTag(RegimeName.NO_REGULATION, "hiring"), prm) == 0.0


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("scenario", list(Scenario))
def test_engine_matches_closed_form(seed, scenario):
    prm = random_params(np.random.default_rng(100 + seed), scenario)
    emb = embed_as_general(prm, scenario)
    for regime in CLOSED_FORM_REGIMES:
        cf = closed_form_welfare(RegimeTag(regime, scenario), prm)
        mean, se = ge.expected_welfare(emb.regimes[regime], emb.dist, 100_000, seed)
        assert abs(mean - cf) <= 3 * se + 1e-10, (scenario, regime, mean, cf, se)
        exact = ge.expected_welfare_exact(emb.regimes[regime], emb.dist)
        assert exact == pytest.approx(cf, rel=1e-8, abs=1e-12)


def test_targeted_is_first_best_for_rank_two_gap():
    prm = TwoVarParams(type_sd=0.3, delta_overall=-0.4, delta_hu=0.7)
    emb = embed_as_general(prm, "lending")
    vals = ge.welfare_samples(emb.regimes[RegimeName.TARGETED_EXPLAINER], emb.dist, 2000, 0)
    assert np.max(np.abs(vals)) <= 1e-10


def test_lending_interaction_has_no_closed_form():
    with pytest.raises(ValueError, match="interaction"):
        closed_form_welfare(RegimeTag(RegimeName.NO_REGULATION, "lending"), TwoVarParams(delta_interaction=0.1))
