"""Agent best responses, welfare and explainer design for the regulation game.

The agent minimises ``(f - u_bar)' Omega_U (f - u_bar)`` subject to linear
ex-ante restrictions ``A f = a`` and linear explainer audits ``E f = e``.
After whitening by ``Omega_U^{1/2}`` and an RQ factorisation of the stacked
constraint rows, the solution splits into three coordinate blocks:

* free block: the agent's own whitened bliss,
* explained block: the principal's whitened bliss for the realised state,
* restricted block: fixed before the state is seen.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg

from auditgame._linalg import (
    PINV_RTOL,
    RANK_RTOL,
    as_matrix,
    as_vector,
    eigh_desc,
    inv_sqrtm_pd,
    numerical_rank,
    row_rank,
    sqrtm_psd,
    symmetrize,
)
from auditgame.state_model import (
    DrawBatch,
    MixtureScenario,
    NoiseModel,
    QuadraticObjective,
    ScenarioDistribution,
    misalignment_moments,
    signal_batch,
)

PD_RTOL = 1e-10
QR_ATOL = 1e-8


class ConstraintError(ValueError):
    """Stacked explainer/restriction rows are rank deficient."""


# -- domain types ------------------------------------------------------------------


@dataclass(frozen=True)
class Restriction:
    """Ex-ante restriction ``A f = a``.  ``a=None`` lets the audit rule set it."""

    A: np.ndarray
    a: np.ndarray | None = None

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        m, n = A.shape
        if m > n:
            raise ValueError(f"restriction has {m} rows but only {n} columns")
        if row_rank(A) < m:
            raise ConstraintError("restriction rows are not linearly independent")
        object.__setattr__(self, "A", A)
        if self.a is not None:
            a = as_vector(self.a, "a")
            if a.size != m:
                raise ValueError(f"target a has length {a.size}, expected {m}")
            object.__setattr__(self, "a", a)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def with_target(self, a) -> "Restriction":
        return Restriction(self.A, a)


@dataclass(frozen=True)
class Explainer:
    """Linear explanation ``f -> E f`` with ``k`` full-rank rows."""

    E: np.ndarray
    degenerate: bool = False  # set when built from a zero target moment

    def __post_init__(self):
        E = as_matrix(self.E, "E")
        k, n = E.shape
        if k > n:
            raise ValueError(f"explainer has {k} rows but only {n} columns")
        if row_rank(E) < k:
            raise ConstraintError("explainer rows are not linearly independent")
        object.__setattr__(self, "E", E)

    @property
    def k(self) -> int:
        return self.E.shape[0]

    def explain(self, f) -> np.ndarray:
        return self.E @ np.asarray(f, dtype=float).T


class RegimeKind(str, Enum):
    NO_REGULATION = "NoRegulation"
    EX_ANTE = "ExAnteRestriction"
    OUTCOME_AUDIT = "OutcomeAudit"
    EXPLAINER_AUDIT = "ExplainerAudit"
    COMBINED = "Combined"


@dataclass(frozen=True)
class PolicyRegime:
    kind: RegimeKind
    explainer: Explainer | None = None
    restriction: Restriction | None = None
    name: str = ""
    threshold: float = math.inf  # outcome audits only
    noise: NoiseModel | None = None
    cells: tuple[int, ...] | None = None

    def __post_init__(self):
        kind = RegimeKind(self.kind)
        object.__setattr__(self, "kind", kind)
        need_e = kind in (RegimeKind.EXPLAINER_AUDIT, RegimeKind.COMBINED)
        need_a = kind in (RegimeKind.EX_ANTE, RegimeKind.COMBINED)
        if need_e != (self.explainer is not None):
            raise ValueError(f"{kind.value} {'needs' if need_e else 'takes no'} explainer")
        if need_a != (self.restriction is not None):
            raise ValueError(f"{kind.value} {'needs' if need_a else 'takes no'} restriction")
        if not self.name:
            object.__setattr__(self, "name", kind.value)

    @property
    def k(self) -> int:
        return 0 if self.explainer is None else self.explainer.k

    @property
    def m(self) -> int:
        return 0 if self.restriction is None else self.restriction.m

    @staticmethod
    def build(explainer=None, restriction=None, name="") -> "PolicyRegime":
        """Pick the regime kind from which instruments are present."""
        if explainer is not None and restriction is not None:
            kind = RegimeKind.COMBINED
        elif explainer is not None:
            kind = RegimeKind.EXPLAINER_AUDIT
        elif restriction is not None:
            kind = RegimeKind.EX_ANTE
        else:
            kind = RegimeKind.NO_REGULATION
        return PolicyRegime(kind, explainer, restriction, name)


@dataclass(frozen=True)
class StackedFactorization:
    """``(E; A) Q = (0 | R)`` with R upper triangular, blocks [free|explained|restricted]."""

    Q: np.ndarray
    R: np.ndarray
    k: int
    m: int

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def block_dims(self) -> tuple[int, int, int]:
        return (self.n - self.k - self.m, self.k, self.m)

    @property
    def R1(self) -> np.ndarray:
        return self.R[: self.k, : self.k]

    @property
    def R12(self) -> np.ndarray:
        return self.R[: self.k, self.k :]

    @property
    def R2(self) -> np.ndarray:
        return self.R[self.k :, self.k :]

    @property
    def R_blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.R1, self.R12, self.R2

    @property
    def Q_free(self) -> np.ndarray:
        return self.Q[:, : self.n - self.k - self.m]

    @property
    def Q_explained(self) -> np.ndarray:
        r = self.n - self.k - self.m
        return self.Q[:, r : r + self.k]

    @property
    def Q_restricted(self) -> np.ndarray:
        return self.Q[:, self.n - self.m :]

    def solve_targets(self, e: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rotated coordinates of the explained and restricted blocks."""
        g_r = scipy.linalg.solve_triangular(self.R2, a) if self.m else np.zeros(0)
        rhs = e - self.R12 @ g_r if self.k else np.zeros(0)
        g_e = scipy.linalg.solve_triangular(self.R1, rhs) if self.k else np.zeros(0)
        return g_e, g_r


@dataclass(frozen=True)
class RegimeOutcome:
    chosen_f: np.ndarray
    realized_welfare: float
    audit_passed: bool


class Whitening(NamedTuple):
    b: np.ndarray
    c_target_map: Callable[[np.ndarray], np.ndarray]
    B: np.ndarray
    unwhiten_map: Callable[[np.ndarray], np.ndarray]
    root: np.ndarray
    inv_root: np.ndarray


# -- core linear algebra -----------------------------------------------------------


def ridge_floor(omega: np.ndarray, scale: float = 1e-8) -> float:
    n = omega.shape[0]
    return scale * float(np.trace(omega)) / n


def _weight_of(obj) -> np.ndarray:
    return obj.weight if isinstance(obj, QuadraticObjective) else as_matrix(obj)


def _checked_roots(omega_u: np.ndarray, ridge: float | None) -> tuple[np.ndarray, np.ndarray]:
    omega_u = symmetrize(omega_u)
    vals = np.linalg.eigvalsh(omega_u)
    if vals.min() <= PD_RTOL * max(abs(vals.max()), 1e-300):
        if ridge is None:
            raise np.linalg.LinAlgError(
                "Omega_U is singular; pass a ridge floor such as "
                f"ridge={ridge_floor(omega_u):.3g} (1e-8 * trace / n)"
            )
        omega_u = omega_u + ridge * np.eye(omega_u.shape[0])
    return sqrtm_psd(omega_u), inv_sqrtm_pd(omega_u)


def whiten(
    objective_U: QuadraticObjective,
    objective_W: QuadraticObjective,
    ridge: float | None = None,
) -> Whitening:
    """Change of variables that turns the agent's weight into the identity."""
    root, inv_root = _checked_roots(objective_U.weight, ridge)
    b = root @ objective_W.bliss
    B = symmetrize(inv_root @ objective_W.weight @ inv_root)
    return Whitening(
        b=b,
        c_target_map=lambda u: root @ np.asarray(u, dtype=float),
        B=B,
        unwhiten_map=lambda f: inv_root @ np.asarray(f, dtype=float),
        root=root,
        inv_root=inv_root,
    )


def stacked_qr(E: np.ndarray | Explainer | None, A: np.ndarray | Restriction | None) -> StackedFactorization:
    """Orthogonal Q and upper-triangular R with ``(E; A) Q = (0 | R)``."""
    if isinstance(E, Explainer):
        E = E.E
    if isinstance(A, Restriction):
        A = A.A
    n = None
    for mat in (E, A):
        if mat is not None:
            n = as_matrix(mat).shape[1]
    if n is None:
        raise ValueError("need at least one of E or A to infer n; use stacked_qr_empty(n)")
    E = np.zeros((0, n)) if E is None else as_matrix(E)
    A = np.zeros((0, n)) if A is None else as_matrix(A)
    k, m = E.shape[0], A.shape[0]
    if E.shape[1] != n or A.shape[1] != n:
        raise ValueError("E and A must have the same number of columns")
    M = np.vstack([E, A])
    r = k + m
    if r > n:
        raise ConstraintError(
            f"{r} explainer and restriction rows exceed n={n}: "
            "redundant or contradictory conditions"
        )
    if r == 0:
        return StackedFactorization(np.eye(n), np.zeros((0, 0)), 0, 0)
    R_full, Q_rq = scipy.linalg.rq(M)
    R = R_full[:, n - r :]
    Q = Q_rq.T
    diag = np.abs(np.diag(R))
    if diag.min() <= PINV_RTOL * max(np.abs(M).max(), 1e-300) or row_rank(M) < r:
        raise ConstraintError("stacked (E; A) is rank deficient: redundant or contradictory conditions")
    return StackedFactorization(Q, np.triu(R), k, m)


def stacked_qr_empty(n: int) -> StackedFactorization:
    return StackedFactorization(np.eye(n), np.zeros((0, 0)), 0, 0)


def welfare(f, objective_W: QuadraticObjective) -> float:
    """Principal welfare ``-(f - w)' Omega_W (f - w)``."""
    return objective_W.value(f)


class _Plan(NamedTuple):
    """Precomputed best-response map for one agent weight matrix."""

    root: np.ndarray
    inv_root: np.ndarray
    fact: StackedFactorization
    E_w: np.ndarray  # whitened explainer rows
    A_w: np.ndarray


def _plan(regime: PolicyRegime, omega_u: np.ndarray, ridge: float | None = None) -> _Plan:
    root, inv_root = _checked_roots(omega_u, ridge)
    n = omega_u.shape[0]
    E_w = regime.explainer.E @ inv_root if regime.explainer is not None else np.zeros((0, n))
    A_w = regime.restriction.A @ inv_root if regime.restriction is not None else np.zeros((0, n))
    if E_w.shape[0] + A_w.shape[0] == 0:
        fact = stacked_qr_empty(n)
    else:
        fact = stacked_qr(E_w if E_w.shape[0] else None, A_w if A_w.shape[0] else None)
    return _Plan(root, inv_root, fact, E_w, A_w)


def _respond(plan: _Plan, u: np.ndarray, e: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Best responses for a stack of agent blisses ``u`` (N, n) and targets."""
    fact = plan.fact
    c = u @ plan.root  # root is symmetric
    h_free = c @ fact.Q_free
    parts = [h_free @ fact.Q_free.T]
    if fact.k or fact.m:
        N = u.shape[0]
        e = np.broadcast_to(np.asarray(e, dtype=float).reshape(-1, fact.k), (N, fact.k)) if fact.k else np.zeros((N, 0))
        g_r = scipy.linalg.solve_triangular(fact.R2, np.asarray(a, dtype=float)) if fact.m else np.zeros(0)
        if fact.k:
            rhs = e - (fact.R12 @ g_r)[None, :]
            g_e = scipy.linalg.solve_triangular(fact.R1, rhs.T).T
            parts.append(g_e @ fact.Q_explained.T)
        if fact.m:
            parts.append(np.broadcast_to(g_r @ fact.Q_restricted.T, (N, fact.n)))
    f_tilde = np.sum(parts, axis=0)
    return f_tilde @ plan.inv_root


def agent_best_response(
    u_bar,
    objective_U,
    regime: PolicyRegime,
    e=None,
    a=None,
    ridge: float | None = None,
) -> np.ndarray:
    """Agent-optimal f given audit targets ``e`` (explained) and ``a`` (restricted).

    ``objective_U`` may be a QuadraticObjective or the weight matrix itself.
    """
    if regime.kind is RegimeKind.OUTCOME_AUDIT:
        raise ValueError("outcome audits impose no linear constraint; see outcome_audit_demo")
    omega_u = _weight_of(objective_U)
    u = as_vector(u_bar)
    if u.size != omega_u.shape[0]:
        raise ValueError("u_bar and Omega_U dimensions differ")
    if a is None and regime.restriction is not None:
        a = regime.restriction.a
    if regime.m and a is None:
        raise ValueError("restriction target a is unset; resolve it with audit_target")
    if regime.k and e is None:
        raise ValueError("explainer target e is required")
    e = np.zeros(0) if e is None else as_vector(e)
    a = np.zeros(0) if a is None else as_vector(a)
    if e.size != regime.k or a.size != regime.m:
        raise ValueError(f"targets have lengths ({e.size}, {a.size}), expected ({regime.k}, {regime.m})")
    plan = _plan(regime, omega_u, ridge)
    return _respond(plan, u[None, :], e, a)[0]


def _explainer_targets(plan: _Plan, w: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Principal-preferred explanation of each row of ``w`` given restriction target a."""
    fact = plan.fact
    if fact.k == 0:
        return np.zeros((w.shape[0], 0))
    b = w @ plan.root
    h_exp = b @ fact.Q_explained
    g_r = scipy.linalg.solve_triangular(fact.R2, a) if fact.m else np.zeros(0)
    return h_exp @ fact.R1.T + (fact.R12 @ g_r)[None, :]


def restriction_target(restriction: Restriction, mean_w: np.ndarray) -> np.ndarray:
    """State-independent target: the restriction applied to the mean principal bliss."""
    return restriction.A @ mean_w


def _mean_w(dist: ScenarioDistribution) -> np.ndarray:
    mom = dist.moments()
    if mom is None:
        raise ValueError(
            "restriction target needs E[w_bar]; the distribution has no analytic moments"
        )
    return mom.mean_w


def audit_target(
    explainer: Explainer | None,
    principal: QuadraticObjective,
    dist: ScenarioDistribution | None,
    restriction: Restriction | None = None,
    omega_u=None,
    mean_w=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Targets ``(e, a)`` for one realised state.

    ``a`` fixes the restricted block at its ex-ante expectation; ``e`` puts the
    explained block at the principal's whitened bliss for this state.
    ``omega_u`` defaults to the fixed agent weight of ``dist``.
    """
    n = principal.n
    if restriction is not None and restriction.a is not None:
        a = restriction.a
    elif restriction is not None:
        if mean_w is None:
            if dist is None:
                raise ValueError("restriction target needs dist or mean_w")
            mean_w = _mean_w(dist)
        a = restriction_target(restriction, as_vector(mean_w))
    else:
        a = np.zeros(0)
    if explainer is None:
        return np.zeros(0), a
    if omega_u is None:
        if dist is None or dist.fixed_weights is None:
            raise ValueError("omega_u is required when the distribution has state-varying weights")
        omega_u = dist.fixed_weights[1]
    regime = PolicyRegime.build(explainer, restriction.with_target(a) if restriction else None)
    plan = _plan(regime, _weight_of(omega_u))
    if plan.fact.n != n:
        raise ValueError("dimension mismatch between explainer and principal objective")
    e = _explainer_targets(plan, principal.bliss[None, :], a)[0]
    return e, a


def resolve_regime(regime: PolicyRegime, dist: ScenarioDistribution, mean_w=None) -> PolicyRegime:
    """Fill an unset restriction target with its ex-ante optimum."""
    if regime.restriction is None or regime.restriction.a is not None:
        return regime
    if mean_w is None:
        mean_w = _mean_w(dist)
    a = restriction_target(regime.restriction, as_vector(mean_w))
    return PolicyRegime(
        regime.kind,
        regime.explainer,
        regime.restriction.with_target(a),
        regime.name,
        regime.threshold,
        regime.noise,
        regime.cells,
    )


# -- playing the game over draws ------------------------------------------------------


def best_responses(regime: PolicyRegime, batch: DrawBatch, ridge: float | None = None) -> np.ndarray:
    """Agent best responses for every draw, with audit targets set per draw.

    The regime's restriction target must already be resolved.
    """
    if regime.kind is RegimeKind.OUTCOME_AUDIT:
        raise ValueError(
            "outcome audits with full-support noise fail every f with positive probability; "
            "see outcome_audit_demo"
        )
    if regime.kind is RegimeKind.NO_REGULATION:
        return batch.u.copy()
    a = regime.restriction.a if regime.restriction is not None else np.zeros(0)
    if regime.m and a is None:
        raise ValueError("restriction target a is unset; call resolve_regime first")
    if batch.omega_u.ndim == 2:
        plan = _plan(regime, batch.omega_u, ridge)
        e = _explainer_targets(plan, batch.w, a)
        return _respond(plan, batch.u, e, a)
    out = np.empty_like(batch.u)
    for i in range(len(batch)):
        plan = _plan(regime, batch.omega_u[i], ridge)
        e = _explainer_targets(plan, batch.w[i : i + 1], a)
        out[i] = _respond(plan, batch.u[i : i + 1], e, a)[0]
    return out


def welfare_batch(f: np.ndarray, batch: DrawBatch) -> np.ndarray:
    d = f - batch.w
    if batch.omega_w.ndim == 2:
        q = np.einsum("ij,jk,ik->i", d, batch.omega_w, d)
    else:
        q = np.einsum("ij,ijk,ik->i", d, batch.omega_w, d)
    return -q + batch.welfare_offset


def play(regime: PolicyRegime, batch: DrawBatch, i: int) -> RegimeOutcome:
    """Single-draw outcome, for inspection."""
    f = best_responses(regime, DrawBatch(
        training_state=batch.training_state[i : i + 1],
        deployment_scores=batch.deployment_scores[i : i + 1],
        mu=batch.mu[i : i + 1],
        agent_type=batch.agent_type[i : i + 1],
        w=batch.w[i : i + 1],
        u=batch.u[i : i + 1],
        omega_w=batch.omega_w if batch.omega_w.ndim == 2 else batch.omega_w[i : i + 1],
        omega_u=batch.omega_u if batch.omega_u.ndim == 2 else batch.omega_u[i : i + 1],
        welfare_offset=batch.welfare_offset[i : i + 1],
    ))[0]
    draw = batch.draw(i)
    passed = True
    if regime.restriction is not None:
        a = regime.restriction.a
        passed &= bool(np.allclose(regime.restriction.A @ f, a, atol=1e-8 * (1 + np.abs(a).max(initial=0))))
    return RegimeOutcome(f, welfare(f, draw.principal) + draw.welfare_offset, passed)


def welfare_samples(
    regime: PolicyRegime,
    dist: ScenarioDistribution,
    n_samples: int,
    seed: int,
    ridge: float | None = None,
) -> np.ndarray:
    """Per-draw realised welfare.  Equal seeds give equal draws, so two regimes
    evaluated with the same seed form a paired comparison."""
    regime = resolve_regime(regime, dist)
    batch = dist.sample(n_samples, seed)
    return welfare_batch(best_responses(regime, batch, ridge), batch)


def expected_welfare(
    regime: PolicyRegime,
    dist: ScenarioDistribution,
    n_samples: int,
    seed: int,
    ridge: float | None = None,
) -> tuple[float, float]:
    """Monte Carlo mean and standard error of welfare."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    vals = welfare_samples(regime, dist, n_samples, seed, ridge)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))


def paired_difference(
    regime_a: PolicyRegime,
    regime_b: PolicyRegime,
    dist: ScenarioDistribution,
    n_samples: int,
    seed: int,
) -> tuple[float, float]:
    """Mean and standard error of W(a) - W(b) on common draws."""
    diff = welfare_samples(regime_a, dist, n_samples, seed) - welfare_samples(
        regime_b, dist, n_samples, seed
    )
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))


def _linear_response_map(regime: PolicyRegime, omega_u: np.ndarray, n: int):
    """Best response as ``f = K (w; u) + c`` for fixed weights."""
    if regime.kind is RegimeKind.NO_REGULATION:
        return np.hstack([np.zeros((n, n)), np.eye(n)]), np.zeros(n)
    plan = _plan(regime, omega_u)
    a = regime.restriction.a if regime.restriction is not None else np.zeros(0)
    basis = np.eye(n)
    zeros = np.zeros((n, n))
    const = _respond(plan, zeros[:1], _explainer_targets(plan, zeros[:1], a), a)[0]
    # row i is the response to a unit principal (resp. agent) bliss
    Kw = _respond(plan, zeros, _explainer_targets(plan, basis, a), a) - const
    Ku = _respond(plan, basis, _explainer_targets(plan, zeros, a), a) - const
    return np.hstack([Kw.T, Ku.T]), const


def expected_welfare_exact(regime: PolicyRegime, dist: ScenarioDistribution) -> float:
    """Exact expected welfare from analytic moments or finite support."""
    regime = resolve_regime(regime, dist)
    if isinstance(dist, MixtureScenario):
        support = dist.support()
        vals = welfare_batch(best_responses(regime, support), support)
        return float(dist.probs @ vals)
    mom = dist.moments()
    if mom is None or dist.fixed_weights is None:
        raise ValueError("exact welfare needs fixed weights and analytic moments")
    omega_w, omega_u = dist.fixed_weights
    n = mom.n
    K, c = _linear_response_map(regime, omega_u, n)
    D = K - np.hstack([np.eye(n), np.zeros((n, n))])  # f - w as a map of (w, u)
    mean_d = D @ mom.joint_mean + c
    val = np.trace(omega_w @ D @ mom.joint_cov @ D.T) + mean_d @ omega_w @ mean_d
    return float(-val + mom.offset_mean)


# -- explainer design -----------------------------------------------------------------


def _canonical_eigvecs(vals: np.ndarray, vecs: np.ndarray, tol: float) -> np.ndarray:
    """Deterministic eigenbasis: within tied eigenvalues pick a basis by pivoted
    QR, order by the index of each vector's largest entry, make that entry positive."""
    n = vals.size
    out = np.empty_like(vecs)
    i = 0
    while i < n:
        j = i + 1
        while j < n and abs(vals[j] - vals[i]) <= tol:
            j += 1
        V = vecs[:, i:j]
        if j - i > 1:
            P = V @ V.T
            _, _, piv = scipy.linalg.qr(P, pivoting=True)
            cols = np.sort(piv[: j - i])
            basis, _ = np.linalg.qr(P[:, cols])
            V = basis
        lead = np.argmax(np.abs(V), axis=0)
        order = np.argsort(lead, kind="stable")
        V = V[:, order]
        lead = lead[order]
        signs = np.sign(V[lead, np.arange(V.shape[1])])
        signs[signs == 0] = 1.0
        out[:, i:j] = V * signs
        i = j
    return out


def prediction_explainer(second_moment, omega, k: int) -> Explainer:
    """k linear scores that best reconstruct a target with the given second moment
    under the ``omega``-weighted quadratic loss.

    Rows are ``(omega^{1/2} v_i)'`` for the top-k eigenvectors ``v_i`` of
    ``omega^{1/2} M omega^{1/2}``.
    """
    M = symmetrize(as_matrix(second_moment))
    omega = symmetrize(as_matrix(omega))
    n = M.shape[0]
    if omega.shape != (n, n):
        raise ValueError("second moment and weight shapes differ")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in 1..{n}, got {k}")
    root = sqrtm_psd(omega)
    X = symmetrize(root @ M @ root)
    vals, vecs = eigh_desc(X)
    scale = max(abs(vals[0]), 1e-300)
    degenerate = vals[0] <= RANK_RTOL * max(np.abs(X).max(), 1e-300) or not np.any(M)
    if degenerate:
        warnings.warn("target second moment is zero; returning an arbitrary explainer", stacklevel=2)
        vecs = np.eye(n)
    else:
        vecs = _canonical_eigvecs(vals, vecs, tol=1e-9 * scale)
    rows = (root @ vecs[:, :k]).T
    return Explainer(rows, degenerate=bool(degenerate))


def reconstruction_loss(explainer: Explainer, second_moment, omega) -> float:
    """Expected omega-weighted loss of the best linear reconstruction from E t."""
    M = symmetrize(as_matrix(second_moment))
    root = sqrtm_psd(omega)
    inv_root = inv_sqrtm_pd(omega)
    X = root @ M @ root
    V = inv_root @ explainer.E.T  # whitened row space
    Qv, _ = np.linalg.qr(V)
    resid = np.eye(X.shape[0]) - Qv @ Qv.T
    return float(np.trace(resid @ X @ resid))


def default_omega(dist: ScenarioDistribution, omega=None):
    if omega is not None:
        return as_matrix(omega)
    if dist.fixed_weights is None:
        raise ValueError("pass omega explicitly when weights vary across states")
    return dist.fixed_weights[1]


def targeted_explainer(
    dist: ScenarioDistribution,
    omega=None,
    k: int = 1,
    n_samples: int = 100_000,
    seed: int = 0,
    centered: bool = False,
) -> Explainer:
    """Prediction explainer for the misalignment gap ``u_bar - w_bar``.

    With ``centered=True`` the explainer is built from the gap covariance and,
    if that loses rank relative to the uncentred moment, the mean-gap direction
    is appended so constant disagreement stays visible.
    """
    omega = default_omega(dist, omega)
    mm = misalignment_moments(dist, n_samples, seed)
    if not centered:
        return prediction_explainer(mm.m2_gap, omega, k)
    var_gap = symmetrize(mm.m2_gap - np.outer(mm.mean_gap, mm.mean_gap))
    r_var = numerical_rank(var_gap) if np.any(var_gap) else 0
    if r_var >= mm.rank_gap or r_var >= k:
        return prediction_explainer(var_gap if r_var else mm.m2_gap, omega, k)
    root = sqrtm_psd(omega)
    X = root @ var_gap @ root
    vals, vecs = eigh_desc(X)
    vecs = _canonical_eigvecs(vals, vecs, 1e-9 * max(abs(vals[0]), 1e-300))
    cols = [vecs[:, i] for i in range(r_var)]
    m = root @ mm.mean_gap
    for c in cols:
        m = m - (c @ m) * c
    cols.append(m / np.linalg.norm(m))
    basis, _ = np.linalg.qr(np.column_stack(cols + [np.eye(omega.shape[0])[:, i] for i in range(omega.shape[0])]))
    rows = (root @ basis[:, :k]).T
    return Explainer(rows)


def first_best_achievable(dist: ScenarioDistribution, k: int, n_samples: int = 100_000, seed: int = 0) -> bool:
    return misalignment_moments(dist, n_samples, seed).rank_gap <= k


class ExAnteCondition(NamedTuple):
    recommended: bool
    min_var_eig: float
    gap_eig_k1: float


def exante_condition(var_w, m2_gap, omega, k: int) -> ExAnteCondition:
    """Compare the smallest eigenvalue of Var(omega^{1/2} w) with the (k+1)-th
    largest of omega^{1/2} M2 omega^{1/2}; restriction is not recommended when
    the former is at least the latter."""
    root = sqrtm_psd(as_matrix(omega))
    lam_var = float(np.linalg.eigvalsh(symmetrize(root @ as_matrix(var_w) @ root))[0])
    gap_vals, _ = eigh_desc(root @ as_matrix(m2_gap) @ root)
    lam_gap = float(gap_vals[k]) if k < gap_vals.size else 0.0
    lam_gap = max(lam_gap, 0.0)
    return ExAnteCondition(not (lam_var >= lam_gap), lam_var, lam_gap)


def exante_recommended(
    dist: ScenarioDistribution,
    omega=None,
    k: int = 1,
    n_samples: int = 100_000,
    seed: int = 0,
) -> bool:
    if dist.fixed_weights is None:
        raise ValueError("the ex-ante rule assumes a weight matrix that is fixed across states")
    omega = dist.fixed_weights[1] if omega is None else omega
    mm = misalignment_moments(dist, n_samples, seed)
    return exante_condition(mm.var_w, mm.m2_gap, omega, k).recommended


@dataclass
class RegimeCandidate:
    m: int
    regime: PolicyRegime
    mean: float
    std_error: float
    diff_vs_unrestricted: float
    diff_std_error: float
    label: str = ""


@dataclass
class RegimeSearchResult:
    candidates: list[RegimeCandidate]
    explainer: Explainer | None
    best: RegimeCandidate = field(init=False)

    def __post_init__(self):
        self.best = max(self.candidates, key=lambda c: c.mean)

    @property
    def unrestricted(self) -> RegimeCandidate:
        return self.candidates[0]


def gap_restriction_rows(dist: ScenarioDistribution, k: int, m: int, omega=None, n_samples=100_000, seed=0) -> np.ndarray:
    """Rows for an m-dimensional restriction on the gap directions just beyond
    the k explained ones, mapped back from whitened coordinates."""
    omega = default_omega(dist, omega)
    mm = misalignment_moments(dist, n_samples, seed)
    root = sqrtm_psd(omega)
    vals, vecs = eigh_desc(root @ mm.m2_gap @ root)
    vecs = _canonical_eigvecs(vals, vecs, 1e-9 * max(abs(vals[0]), 1e-300))
    return (root @ vecs[:, k : k + m]).T


def regime_search(
    dist: ScenarioDistribution,
    k: int,
    explainer: Explainer | None = None,
    n_samples: int = 20_000,
    seed: int = 0,
    n_random: int = 0,
    exact: bool = False,
) -> RegimeSearchResult:
    """Exhaustive search over restriction dimensions m = 0..n-k.

    The explainer defaults to the targeted one.  For each m the restriction
    rows are the gap eigen-directions k+1..k+m; ``n_random`` extra random
    restrictions per m are added.  Candidates are scored on common draws.
    """
    n = dist.n
    if not 0 <= k <= n:
        raise ValueError("k out of range")
    omega = default_omega(dist, None)
    if explainer is None and k > 0:
        explainer = targeted_explainer(dist, omega, k, seed=seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    specs = [(0, None, "unrestricted")]
    for m in range(1, n - k + 1):
        specs.append((m, gap_restriction_rows(dist, k, m, omega, seed=seed), f"gap-m{m}"))
        for r in range(n_random):
            specs.append((m, rng.standard_normal((m, n)), f"random-m{m}-{r}"))

    base_vals = None
    out = []
    for m, rows, label in specs:
        restriction = Restriction(rows) if rows is not None else None
        try:
            regime = resolve_regime(PolicyRegime.build(explainer, restriction, label), dist)
            if exact:
                mean, se = expected_welfare_exact(regime, dist), 0.0
                vals = None
            else:
                vals = welfare_samples(regime, dist, n_samples, seed)
                mean, se = float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(vals.size))
        except ConstraintError:
            continue
        if base_vals is None:
            base_vals = vals if vals is not None else mean
            d, dse = 0.0, 0.0
        elif vals is None:
            d, dse = mean - base_vals, 0.0
        else:
            diff = vals - base_vals
            d, dse = float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))
        out.append(RegimeCandidate(m, regime, mean, se, d, dse, label))
    return RegimeSearchResult(out, explainer)


# -- outcome audits ---------------------------------------------------------------------


@dataclass
class OutcomeAuditRow:
    label: str
    failure_probability: float
    simulated_frequency: float
    agent_expected_utility: float


def outcome_audit_demo(
    threshold: float,
    dist: ScenarioDistribution,
    candidate_fs: Sequence,
    n_samples: int,
    seed: int,
    noise: NoiseModel | None = None,
    cells: Sequence[int] | None = None,
    labels: Sequence[str] | None = None,
) -> list[OutcomeAuditRow]:
    """Failure probability of an outcome audit ``signal > threshold`` per candidate.

    Each candidate is a constant vector, the string ``"w_bar"`` / ``"u_bar"``,
    or a callable ``batch -> (N, n)``.  The probability integrates the noise
    analytically over the sampled states; the simulated frequency uses one
    noise draw per state.  With an infinite audit cost any positive failure
    probability means expected utility of minus infinity.
    """
    noise = NoiseModel() if noise is None else noise
    if not noise.full_support:
        warnings.warn("noise model has zero scale; failures are deterministic", stacklevel=2)
    batch = dist.sample(n_samples, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    rows = []
    for idx, cand in enumerate(candidate_fs):
        if isinstance(cand, str):
            f = {"w_bar": batch.w, "u_bar": batch.u}[cand]
            label = cand
        elif callable(cand):
            f = np.asarray(cand(batch), dtype=float)
            label = getattr(cand, "__name__", f"f{idx}")
        else:
            f = np.broadcast_to(as_vector(cand), batch.w.shape)
            label = f"f{idx}"
        if labels is not None:
            label = labels[idx]
        mask = np.zeros(batch.n, dtype=bool)
        mask[list(cells) if cells is not None else slice(None)] = True
        weights = batch.mu * mask
        summary = np.sum(weights * (batch.deployment_scores - f), axis=1) / weights.sum(axis=1)
        if math.isinf(threshold) and threshold > 0:
            prob, freq = 0.0, 0.0
        else:
            prob = float(np.mean(noise.exceedance(threshold - summary)))
            sig = signal_batch(f, batch, noise, rng, cells)
            freq = float(np.mean(sig > threshold))
        rows.append(OutcomeAuditRow(label, prob, freq, -math.inf if prob > 0 else 0.0))
    return rows


# -- serialisation ----------------------------------------------------------------------


def regime_to_dict(regime: PolicyRegime) -> dict:
    doc: dict = {"kind": regime.kind.value, "name": regime.name}
    n = None
    if regime.explainer is not None:
        n = regime.explainer.E.shape[1]
        doc["explainer"] = {"k": regime.k, "E": regime.explainer.E.ravel().tolist()}
    if regime.restriction is not None:
        n = regime.restriction.A.shape[1]
        r = {"m": regime.m, "A": regime.restriction.A.ravel().tolist()}
        if regime.restriction.a is not None:
            r["a"] = regime.restriction.a.tolist()
        doc["restriction"] = r
    if regime.kind is RegimeKind.OUTCOME_AUDIT:
        doc["threshold"] = regime.threshold
        if regime.noise is not None:
            doc["noise"] = {"kind": regime.noise.kind, "scale": regime.noise.scale}
        if regime.cells is not None:
            doc["cells"] = list(regime.cells)
    if n is not None:
        doc["n"] = n
    return doc


def regime_from_dict(doc: dict) -> PolicyRegime:
    n = doc.get("n")
    explainer = restriction = None
    if "explainer" in doc:
        ex = doc["explainer"]
        explainer = Explainer(np.asarray(ex["E"], dtype=float).reshape(int(ex["k"]), int(n)))
    if "restriction" in doc:
        r = doc["restriction"]
        restriction = Restriction(np.asarray(r["A"], dtype=float).reshape(int(r["m"]), int(n)), r.get("a"))
    noise = NoiseModel(**doc["noise"]) if "noise" in doc else None
    cells = tuple(doc["cells"]) if "cells" in doc else None
    return PolicyRegime(
        RegimeKind(doc["kind"]),
        explainer,
        restriction,
        doc.get("name", ""),
        float(doc.get("threshold", math.inf)),
        noise,
        cells,
    )


def save_regime(regime: PolicyRegime, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(regime_to_dict(regime), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_regime(path: str | Path) -> PolicyRegime:
    with open(path) as fh:
        return regime_from_dict(json.load(fh))


WELFARE_COLUMNS = ("regime", "mean_welfare", "std_error", "n_samples", "seed")


def write_welfare_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=WELFARE_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("mean_welfare", "std_error"):
                out[key] = format(float(out[key]), ".17g")
            writer.writerow(out)
