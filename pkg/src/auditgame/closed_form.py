"""Two-variable world: four cells (X1, X2) in {0,1}^2 with closed-form welfare.

Cells are ordered (0,0), (0,1), (1,0), (1,1) with X2 varying fastest.  The
score is ``s = alpha + beta X1 + gamma X2 + delta X1 X2`` with jointly normal
coefficients, X1 ~ Bernoulli(.5) independent of X2 ~ Bernoulli(p).

Welfare is measured relative to the principal's first best unless
``baseline="absolute"``; the two only differ in the hiring scenario, where
even the first best carries a fairness cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from enum import Enum

import numpy as np

from auditgame._linalg import symmetrize
from auditgame.game_engine import Explainer, PolicyRegime, Restriction
from auditgame.state_model import LinearGaussianScenario, StateQuadratic

X1 = np.array([0.0, 0.0, 1.0, 1.0])
X2 = np.array([0.0, 1.0, 0.0, 1.0])

# cell scores from (alpha, beta, gamma, delta)
COEF_TO_CELLS = np.array(
    [
        [1.0, 0.0, 0.0, 0.0],
        [1.0, 0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0, 0.0],
        [1.0, 1.0, 1.0, 1.0],
    ]
)
CELLS_TO_COEF = np.linalg.inv(COEF_TO_CELLS)

# cells sharing X1 / sharing X2
X1_PATTERN = np.equal.outer(X1, X1).astype(float)
X2_PATTERN = np.equal.outer(X2, X2).astype(float)


class Scenario(str, Enum):
    MEDICAL = "medical"
    LENDING = "lending"
    HIRING = "hiring"


class RegimeName(str, Enum):
    NO_REGULATION = "NoRegulation"
    EX_ANTE = "ExAnteRestriction"
    OUTCOME_AUDIT = "OutcomeAudit"
    PREDICTION_EXPLAINER = "PredictionExplainerAudit"
    TARGETED_EXPLAINER = "TargetedExplainerAudit"


CLOSED_FORM_REGIMES = (
    RegimeName.NO_REGULATION,
    RegimeName.EX_ANTE,
    RegimeName.PREDICTION_EXPLAINER,
    RegimeName.TARGETED_EXPLAINER,
)


@dataclass(frozen=True)
class RegimeTag:
    regime: RegimeName
    scenario: Scenario

    def __post_init__(self):
        object.__setattr__(self, "regime", RegimeName(self.regime))
        object.__setattr__(self, "scenario", Scenario(self.scenario))


@dataclass(frozen=True)
class TwoVarParams:
    """Parameters of the two-variable world.

    ``alpha..delta`` are the coefficient means; ``sigma0..sigma3`` are standard
    deviations of the common, X1-shared, X2-shared and idiosyncratic cell
    components.  ``group_means`` are per-cell minority shares.  ``type_sd``
    adds independent normal noise to each misalignment coefficient, making
    the agent's type random.
    """

    alpha: float = 0.0
    beta: float = 1.0
    gamma: float = 0.5
    delta: float = 0.25
    p: float = 0.3
    sigma0: float = 1.0
    sigma1: float = 0.6
    sigma2: float = 0.5
    sigma3: float = 0.2
    delta_overall: float = 0.1
    delta_hu: float = 0.2
    delta_interaction: float = 0.0
    lambda_eq: float = 1.0
    group_means: tuple[float, float, float, float] = (0.3, 0.1, 0.3, 0.1)
    type_sd: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.p == 0.5:
            raise ValueError("p = 0.5 makes the X1 and X2 splits indistinguishable")
        if min(self.sigma0, self.sigma1, self.sigma2, self.sigma3) < 0:
            raise ValueError("sigma values must be non-negative")
        if self.lambda_eq < 0 or self.type_sd < 0:
            raise ValueError("lambda_eq and type_sd must be non-negative")
        shares = tuple(float(q) for q in self.group_means)
        if len(shares) != 4 or not all(0.0 <= q <= 1.0 for q in shares):
            raise ValueError("group_means must be four shares in [0, 1]")
        object.__setattr__(self, "group_means", shares)

    @classmethod
    def from_dict(cls, doc: dict) -> "TwoVarParams":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown parameters: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def ordered(self) -> bool:
        s = (self.sigma0**2, self.sigma1**2, self.sigma2**2, self.sigma3**2)
        return s[0] > s[1] >= s[2] > s[3]

    @property
    def mu(self) -> np.ndarray:
        p = self.p
        return np.array([0.5 * (1 - p), 0.5 * p, 0.5 * (1 - p), 0.5 * p])

    @property
    def coef_mean(self) -> np.ndarray:
        return np.array([self.alpha, self.beta, self.gamma, self.delta])

    @property
    def cell_mean(self) -> np.ndarray:
        return COEF_TO_CELLS @ self.coef_mean


def build_sigma(params: TwoVarParams, check_order: bool = True) -> np.ndarray:
    """Cell covariance: common factor, X1-shared, X2-shared and idiosyncratic terms."""
    if check_order and not params.ordered:
        raise ValueError("sigma ordering sigma0^2 > sigma1^2 >= sigma2^2 > sigma3^2 is violated")
    sigma = (
        params.sigma0**2 * np.ones((4, 4))
        + params.sigma1**2 * X1_PATTERN
        + params.sigma2**2 * X2_PATTERN
        + params.sigma3**2 * np.eye(4)
    )
    return symmetrize(sigma)


# explanation rows ---------------------------------------------------------------------


def conditional_mean_rows(params: TwoVarParams, x: np.ndarray) -> np.ndarray:
    """Rows r_j with r_j' f = E_mu[f | x = j] for j = 0, 1."""
    mu = params.mu
    lo = mu * (1 - x)
    hi = mu * x
    return np.vstack([lo / lo.sum(), hi / hi.sum()])


def x2_contrast(params: TwoVarParams) -> np.ndarray:
    """g with g' f = E_mu[f | X2=1] - E_mu[f | X2=0]."""
    rows = conditional_mean_rows(params, X2)
    return rows[1] - rows[0]


def group_contrast(params: TwoVarParams) -> np.ndarray:
    """h with h' f = E_mu[f | G=1] - E_mu[f | G=0]."""
    mu = params.mu
    q = np.asarray(params.group_means)
    m1 = mu * q
    m0 = mu * (1 - q)
    if m1.sum() <= 0 or m0.sum() <= 0:
        raise ValueError("group shares leave one group empty")
    return m1 / m1.sum() - m0 / m0.sum()


def group_x2_gap(params: TwoVarParams) -> float:
    """P(X2=1 | G=1) - P(X2=1 | G=0)."""
    mu = params.mu
    q = np.asarray(params.group_means)
    m1, m0 = mu * q, mu * (1 - q)
    return float(m1 @ X2 / m1.sum() - m0 @ X2 / m0.sum())


def _shares_depend_on_x2_only(params: TwoVarParams) -> bool:
    q = params.group_means
    return abs(q[0] - q[2]) <= 1e-12 and abs(q[1] - q[3]) <= 1e-12


# closed forms -------------------------------------------------------------------------


def _moments(c: np.ndarray, params: TwoVarParams, sigma: np.ndarray) -> tuple[float, float]:
    """Mean and variance of c' s."""
    return float(c @ params.cell_mean), float(c @ sigma @ c)


def closed_form_welfare(
    tag: RegimeTag,
    params: TwoVarParams,
    baseline: str = "first_best",
) -> float:
    """Expected welfare of a regime in the two-variable world.

    ``baseline`` is ``"first_best"`` (welfare minus the first-best level),
    ``"absolute"`` or ``"stated"``.  The ``"stated"`` option returns the
    textbook expressions as usually written, which in the hiring case only
    agree with the exact values under special parameters (see README).
    """
    tag = tag if isinstance(tag, RegimeTag) else RegimeTag(*tag)
    if tag.regime is RegimeName.OUTCOME_AUDIT:
        raise ValueError("no closed form; see the outcome audit demo")
    if baseline not in ("first_best", "absolute", "stated"):
        raise ValueError(f"unknown baseline {baseline!r}")
    sigma = build_sigma(params)
    p = params.p
    sd2 = params.type_sd**2
    _, var_mean = _moments(params.mu, params, sigma)

    if tag.scenario is Scenario.MEDICAL:
        return {
            RegimeName.NO_REGULATION: -(params.delta_overall**2 + sd2),
            RegimeName.EX_ANTE: -var_mean,
            RegimeName.PREDICTION_EXPLAINER: 0.0,
            RegimeName.TARGETED_EXPLAINER: 0.0,
        }[tag.regime]

    if tag.scenario is Scenario.LENDING:
        if params.delta_interaction != 0:
            raise ValueError("lending closed forms assume no interaction misalignment")
        d_o, d_hu = params.delta_overall, params.delta_hu
        e_hu2 = d_hu**2 + sd2
        _, var_v = _moments(x2_contrast(params), params, sigma)
        return {
            RegimeName.NO_REGULATION: -((d_o + p * d_hu) ** 2 + sd2 * (1 + p * p)) - p * (1 - p) * e_hu2,
            RegimeName.EX_ANTE: -(var_mean + p * (1 - p) * var_v),
            RegimeName.PREDICTION_EXPLAINER: -p * (1 - p) * e_hu2,
            RegimeName.TARGETED_EXPLAINER: 0.0,
        }[tag.regime]

    # hiring: the fairness penalty acts on V = gamma + .5 delta through rho = lambda kappa^2
    if not _shares_depend_on_x2_only(params):
        raise ValueError("hiring closed forms need minority shares that depend on X2 only")
    mean_v, var_v = _moments(x2_contrast(params), params, sigma)
    ev2 = var_v + mean_v**2
    rho = params.lambda_eq * group_x2_gap(params) ** 2
    tau = 1.0 / (p * (1 - p))
    shrink = 1.0 + rho * tau
    if baseline == "stated":
        return {
            RegimeName.NO_REGULATION: -rho * ev2,
            RegimeName.EX_ANTE: -p * (1 - p) * var_v,
            RegimeName.PREDICTION_EXPLAINER: -rho * ev2,
            RegimeName.TARGETED_EXPLAINER: 0.0,
        }[tag.regime]
    absolute = {
        RegimeName.NO_REGULATION: -rho * ev2,
        RegimeName.EX_ANTE: -p * (1 - p) * var_v - rho * mean_v**2 / shrink,
        RegimeName.PREDICTION_EXPLAINER: -rho * ev2,
        RegimeName.TARGETED_EXPLAINER: -rho * ev2 / shrink,
    }[tag.regime]
    if baseline == "absolute":
        return absolute
    return absolute + rho * ev2 / shrink


# embedding into the general engine ----------------------------------------------------


@dataclass
class Embedding:
    dist: LinearGaussianScenario
    omega_w: np.ndarray
    omega_u: np.ndarray
    explainers: dict[str, Explainer]
    restriction: Restriction
    regimes: dict[RegimeName, PolicyRegime] = field(default_factory=dict)


def embed_as_general(
    params: TwoVarParams,
    scenario: Scenario | str = Scenario.LENDING,
    absolute: bool = False,
    check_order: bool = True,
) -> Embedding:
    """Four-cell representation for the general engine.

    Both weights are diag(mu) except in hiring, where the fairness penalty
    ``lambda (h' f)^2`` is folded into the principal's weight and bliss by
    completing the square.  ``absolute=True`` adds back the state-dependent
    constant so that engine welfare is on the absolute scale.
    """
    scenario = Scenario(scenario)
    mu = params.mu
    omega = np.diag(mu)
    sigma = build_sigma(params, check_order)
    gap = params.delta_overall * np.ones(4)
    loading = [np.ones(4)]
    offset = None
    w_map = np.eye(4)
    omega_w = omega
    if scenario is Scenario.MEDICAL:
        pass
    elif scenario is Scenario.LENDING:
        gap = gap + params.delta_hu * X2 + params.delta_interaction * X1 * X2
        loading.append(X2)
        if params.delta_interaction != 0:
            loading.append(X1 * X2)
    else:
        h = group_contrast(params)
        omega_w = symmetrize(omega + params.lambda_eq * np.outer(h, h))
        w_map = np.linalg.solve(omega_w, omega)
        gap = np.zeros(4)
        loading = []
        if absolute:
            offset = StateQuadratic(-symmetrize(omega - omega @ w_map))
    type_loading = params.type_sd * np.column_stack(loading) if loading and params.type_sd > 0 else None
    # u = s + gap + loading theta, with w = w_map s
    dist = LinearGaussianScenario(
        state_mean=params.cell_mean,
        state_cov=sigma,
        omega_w=omega_w,
        omega_u=omega,
        w_map=w_map,
        u_map=np.eye(4),
        u_shift=gap,
        type_loading=type_loading,
        mu=mu,
        welfare_offset=offset,
    )

    prediction = Explainer(conditional_mean_rows(params, X1))
    if scenario is Scenario.MEDICAL:
        targeted = Explainer(mu[None, :])
        restriction = Restriction(mu[None, :])
    elif scenario is Scenario.LENDING:
        targeted = Explainer(conditional_mean_rows(params, X2))
        restriction = Restriction(conditional_mean_rows(params, X2))
    else:
        targeted = Explainer(x2_contrast(params)[None, :])
        restriction = Restriction(x2_contrast(params)[None, :])

    explainers = {"prediction": prediction, "targeted": targeted}
    regimes = {
        RegimeName.NO_REGULATION: PolicyRegime.build(name=RegimeName.NO_REGULATION.value),
        RegimeName.EX_ANTE: PolicyRegime.build(None, restriction, RegimeName.EX_ANTE.value),
        RegimeName.PREDICTION_EXPLAINER: PolicyRegime.build(prediction, None, RegimeName.PREDICTION_EXPLAINER.value),
        RegimeName.TARGETED_EXPLAINER: PolicyRegime.build(targeted, None, RegimeName.TARGETED_EXPLAINER.value),
    }
    return Embedding(dist, omega_w, omega, explainers, restriction, regimes)


def random_params(rng: np.random.Generator, scenario: Scenario | str = Scenario.LENDING) -> TwoVarParams:
    """Random parameter set respecting the sigma ordering (used by tests and the CLI)."""
    scenario = Scenario(scenario)
    s3 = rng.uniform(0.05, 0.4)
    s2 = s3 + rng.uniform(0.05, 0.6)
    s1 = s2 + rng.uniform(0.0, 0.6)
    s0 = s1 + rng.uniform(0.05, 1.0)
    p = rng.uniform(0.1, 0.9)
    while abs(p - 0.5) < 0.02:
        p = rng.uniform(0.1, 0.9)
    q0, q1 = rng.uniform(0.05, 0.95, size=2)
    return TwoVarParams(
        alpha=rng.normal(),
        beta=rng.normal(),
        gamma=rng.normal(),
        delta=rng.normal(),
        p=p,
        sigma0=s0,
        sigma1=s1,
        sigma2=s2,
        sigma3=s3,
        delta_overall=rng.normal(0, 0.5),
        delta_hu=rng.normal(0, 0.5),
        lambda_eq=rng.uniform(0.0, 5.0),
        group_means=(q0, q1, q0, q1),
        type_sd=float(rng.choice([0.0, rng.uniform(0.05, 0.3)])),
    )


def welfare_table(params: TwoVarParams, baseline: str = "first_best") -> list[dict]:
    """Scenario x regime closed-form table."""
    rows = []
    for scenario in Scenario:
        for regime in CLOSED_FORM_REGIMES:
            try:
                val = closed_form_welfare(RegimeTag(regime, scenario), params, baseline)
            except ValueError as exc:
                val = float("nan")
                note = str(exc)
            else:
                note = ""
            rows.append({"scenario": scenario.value, "regime": regime.value, "welfare": val, "note": note})
    return rows
