"""States, types, quadratic objectives and the scenario distribution.

A scenario distribution draws a training state ``s``, a deployment state
``d = (scores, mu)`` and an agent type ``theta``.  Everything downstream only
needs the draw-conditional objectives: the principal's ``(w_bar, Omega_W)``
and the agent's ``(u_bar, Omega_U)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from auditgame._linalg import (
    PINV_RTOL,
    RANK_RTOL,
    as_matrix,
    as_vector,
    is_psd,
    numerical_rank,
    psd_factor,
    symmetrize,
)

SYM_ATOL = 1e-10


def derive_seed(seed: int, *path: int) -> np.random.SeedSequence:
    """Child seed for (seed, worker, ...) so parallel chunks never share streams."""
    return np.random.SeedSequence([int(seed), *[int(p) for p in path]])


@dataclass(frozen=True)
class QuadraticObjective:
    """Quadratic loss ``-(f - bliss)' weight (f - bliss)`` over predicted scores."""

    bliss: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        bliss = as_vector(self.bliss, "bliss")
        weight = as_matrix(self.weight, "weight")
        if weight.shape != (bliss.size, bliss.size):
            raise ValueError(
                f"weight shape {weight.shape} does not match bliss length {bliss.size}"
            )
        if np.max(np.abs(weight - weight.T), initial=0.0) > SYM_ATOL:
            raise ValueError("weight matrix must be symmetric")
        if not is_psd(weight):
            raise ValueError("weight matrix must be positive semidefinite")
        object.__setattr__(self, "bliss", bliss)
        object.__setattr__(self, "weight", symmetrize(weight))

    @property
    def n(self) -> int:
        return self.bliss.size

    def value(self, f) -> float:
        d = as_vector(f) - self.bliss
        return float(-d @ self.weight @ d)


def expected_objective(
    conditional_draws: Sequence[tuple[float, QuadraticObjective]],
) -> QuadraticObjective:
    """Collapse a finite conditional distribution of objectives into one.

    Up to a constant, ``E[-(f - v)' Omega (f - v)]`` equals
    ``-(f - v_bar)' Omega_bar (f - v_bar)`` with ``Omega_bar = E[Omega]`` and
    ``v_bar = pinv(Omega_bar) E[Omega v]``.
    """
    if not conditional_draws:
        raise ValueError("need at least one conditional draw")
    probs = np.array([p for p, _ in conditional_draws], dtype=float)
    if np.any(probs < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(probs.sum() - 1.0) > 1e-8:
        raise ValueError(f"probabilities sum to {probs.sum()}, expected 1")
    n = conditional_draws[0][1].n
    if any(obj.n != n for _, obj in conditional_draws):
        raise ValueError("all objectives must share the same dimension")

    omega_bar = np.zeros((n, n))
    weighted = np.zeros(n)
    for p, obj in conditional_draws:
        omega_bar += p * obj.weight
        weighted += p * obj.weight @ obj.bliss
    omega_bar = symmetrize(omega_bar)
    bliss = np.linalg.pinv(omega_bar, rcond=PINV_RTOL, hermitian=True) @ weighted
    return QuadraticObjective(bliss, omega_bar)


@dataclass(frozen=True)
class StateQuadratic:
    """Scalar ``s' quad s + lin' s + const`` of the training state."""

    quad: np.ndarray
    lin: np.ndarray | None = None
    const: float = 0.0

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(s)
        out = np.einsum("ij,jk,ik->i", s, self.quad, s) + self.const
        if self.lin is not None:
            out = out + s @ self.lin
        return out

    def mean(self, state_mean: np.ndarray, state_cov: np.ndarray) -> float:
        m = state_mean
        val = np.trace(self.quad @ state_cov) + m @ self.quad @ m + self.const
        if self.lin is not None:
            val += self.lin @ m
        return float(val)


@dataclass(frozen=True)
class NoiseModel:
    """Additive noise on the public signal; any positive scale has full support."""

    kind: str = "gaussian"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "logistic", "laplace"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.scale < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def full_support(self) -> bool:
        return self.scale > 0

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.scale == 0:
            return np.zeros(() if size is None else size)
        if self.kind == "gaussian":
            return rng.normal(0.0, self.scale, size)
        if self.kind == "logistic":
            return rng.logistic(0.0, self.scale, size)
        return rng.laplace(0.0, self.scale, size)

    def exceedance(self, x: np.ndarray) -> np.ndarray:
        """P(noise > x)."""
        x = np.asarray(x, dtype=float)
        if self.scale == 0:
            return (x < 0).astype(float)
        z = x / self.scale
        if self.kind == "gaussian":
            return 0.5 * np.vectorize(math.erfc)(z / math.sqrt(2.0))
        if self.kind == "logistic":
            return 1.0 / (1.0 + np.exp(z))
        return np.where(z < 0, 1.0 - 0.5 * np.exp(z), 0.5 * np.exp(-z))


@dataclass(frozen=True)
class PublicSignal:
    value: float
    noise_model: NoiseModel


@dataclass(frozen=True)
class ScenarioDraw:
    """One joint draw of training state, deployment state and agent type."""

    training_state: np.ndarray
    deployment_scores: np.ndarray
    mu: np.ndarray
    agent_type: np.ndarray
    principal: QuadraticObjective
    agent: QuadraticObjective
    welfare_offset: float = 0.0

    def __post_init__(self):
        mu = as_vector(self.mu)
        if np.any(mu < 0) or abs(mu.sum() - 1.0) > 1e-10:
            raise ValueError("mu must be a probability vector")

    @property
    def deployment_params(self) -> np.ndarray:
        return np.concatenate([self.deployment_scores, self.mu])


@dataclass(frozen=True)
class DrawBatch:
    """Vectorised draws; weight matrices are (n, n) when fixed, else (N, n, n)."""

    training_state: np.ndarray
    deployment_scores: np.ndarray
    mu: np.ndarray
    agent_type: np.ndarray
    w: np.ndarray
    u: np.ndarray
    omega_w: np.ndarray
    omega_u: np.ndarray
    welfare_offset: np.ndarray

    def __len__(self) -> int:
        return self.w.shape[0]

    @property
    def n(self) -> int:
        return self.w.shape[1]

    @property
    def fixed_weights(self) -> bool:
        return self.omega_w.ndim == 2 and self.omega_u.ndim == 2

    def weight_w(self, i: int) -> np.ndarray:
        return self.omega_w if self.omega_w.ndim == 2 else self.omega_w[i]

    def weight_u(self, i: int) -> np.ndarray:
        return self.omega_u if self.omega_u.ndim == 2 else self.omega_u[i]

    def draw(self, i: int) -> ScenarioDraw:
        return ScenarioDraw(
            training_state=self.training_state[i],
            deployment_scores=self.deployment_scores[i],
            mu=self.mu[i],
            agent_type=self.agent_type[i],
            principal=QuadraticObjective(self.w[i], self.weight_w(i)),
            agent=QuadraticObjective(self.u[i], self.weight_u(i)),
            welfare_offset=float(self.welfare_offset[i]),
        )

    @staticmethod
    def concat(batches: Sequence["DrawBatch"]) -> "DrawBatch":
        first = batches[0]

        def cat(name):
            parts = [getattr(b, name) for b in batches]
            if name in ("omega_w", "omega_u") and all(p.ndim == 2 for p in parts):
                return parts[0]
            if name in ("omega_w", "omega_u"):
                parts = [
                    np.broadcast_to(p, (len(b), first.n, first.n)) if p.ndim == 2 else p
                    for p, b in zip(parts, batches)
                ]
            return np.concatenate(parts, axis=0)

        return DrawBatch(**{name: cat(name) for name in DrawBatch.__dataclass_fields__})


@dataclass(frozen=True)
class Moments:
    """Exact first and second moments of the stacked vector (w_bar, u_bar)."""

    joint_mean: np.ndarray
    joint_cov: np.ndarray
    offset_mean: float = 0.0

    @property
    def n(self) -> int:
        return self.joint_mean.size // 2

    @property
    def mean_w(self) -> np.ndarray:
        return self.joint_mean[: self.n]

    @property
    def mean_u(self) -> np.ndarray:
        return self.joint_mean[self.n :]

    @property
    def var_w(self) -> np.ndarray:
        n = self.n
        return self.joint_cov[:n, :n]

    def _gap_map(self) -> np.ndarray:
        n = self.n
        return np.hstack([-np.eye(n), np.eye(n)])

    @property
    def mean_gap(self) -> np.ndarray:
        return self.mean_u - self.mean_w

    @property
    def var_gap(self) -> np.ndarray:
        g = self._gap_map()
        return symmetrize(g @ self.joint_cov @ g.T)

    @property
    def m2_gap(self) -> np.ndarray:
        m = self.mean_gap
        return symmetrize(self.var_gap + np.outer(m, m))


class ScenarioDistribution:
    """Seeded sampler over (s, d, theta) with optional analytic moments.

    Subclasses implement ``_sample(rng, n_samples) -> DrawBatch`` and may
    override ``moments()``.  ``fixed_weights`` is ``(Omega_W, Omega_U)`` when
    both weights are constant across states, else ``None``.
    """

    n: int
    fixed_weights: tuple[np.ndarray, np.ndarray] | None = None
    chunk_size: int = 50_000

    def _sample(self, rng: np.random.Generator, n_samples: int) -> DrawBatch:
        raise NotImplementedError

    def moments(self) -> Moments | None:
        return None

    def sample(self, n_samples: int, seed: int) -> DrawBatch:
        """Draw ``n_samples`` states.  Chunks use derived seeds, so the result
        does not depend on how the chunks are later distributed to workers."""
        if n_samples < 1:
            raise ValueError("n_samples must be positive")
        n_chunks = math.ceil(n_samples / self.chunk_size)
        batches = []
        for c in range(n_chunks):
            size = min(self.chunk_size, n_samples - c * self.chunk_size)
            rng = np.random.default_rng(derive_seed(seed, c))
            batches.append(self._sample(rng, size))
        return batches[0] if len(batches) == 1 else DrawBatch.concat(batches)

    def draws(self, n_samples: int, seed: int) -> Iterator[ScenarioDraw]:
        batch = self.sample(n_samples, seed)
        for i in range(len(batch)):
            yield batch.draw(i)


class LinearGaussianScenario(ScenarioDistribution):
    """Gaussian training state with bliss points affine in the state.

    ``s ~ N(state_mean, state_cov)``, ``theta ~ N(0, I_q)`` independent,
    ``w_bar = w_map s + w_shift`` and
    ``u_bar = u_map s + u_shift + type_loading theta``.
    Deployment scores default to ``w_bar`` plus optional Gaussian noise.
    ``welfare_offset`` adds a state-dependent constant to realised welfare
    (used when a penalty is folded into the principal's objective).
    """

    def __init__(
        self,
        state_mean,
        state_cov,
        omega_w,
        omega_u=None,
        w_map=None,
        w_shift=None,
        u_map=None,
        u_shift=None,
        type_loading=None,
        mu=None,
        deployment_noise: float = 0.0,
        welfare_offset: StateQuadratic | None = None,
    ):
        self.state_mean = as_vector(state_mean)
        d = self.state_mean.size
        self.state_cov = symmetrize(as_matrix(state_cov))
        if self.state_cov.shape != (d, d):
            raise ValueError("state_cov shape mismatch")
        if not is_psd(self.state_cov):
            raise ValueError("state_cov must be positive semidefinite")
        self.w_map = np.eye(d) if w_map is None else as_matrix(w_map)
        n = self.w_map.shape[0]
        self.n = n
        self.w_shift = np.zeros(n) if w_shift is None else as_vector(w_shift)
        self.u_map = self.w_map.copy() if u_map is None else as_matrix(u_map)
        self.u_shift = np.zeros(n) if u_shift is None else as_vector(u_shift)
        self.type_loading = (
            np.zeros((n, 0)) if type_loading is None else as_matrix(type_loading)
        )
        if self.type_loading.shape[0] != n:
            self.type_loading = self.type_loading.reshape(n, -1)
        omega_w = symmetrize(as_matrix(omega_w))
        omega_u = omega_w.copy() if omega_u is None else symmetrize(as_matrix(omega_u))
        QuadraticObjective(np.zeros(n), omega_w)
        QuadraticObjective(np.zeros(n), omega_u)
        self.fixed_weights = (omega_w, omega_u)
        self.mu = np.full(n, 1.0 / n) if mu is None else as_vector(mu)
        self.deployment_noise = float(deployment_noise)
        self.welfare_offset = welfare_offset
        self._factor = psd_factor(self.state_cov)

    def _sample(self, rng, n_samples):
        d = self.state_mean.size
        q = self.type_loading.shape[1]
        z = rng.standard_normal((n_samples, d))
        s = self.state_mean + z @ self._factor.T
        theta = rng.standard_normal((n_samples, q))
        w = s @ self.w_map.T + self.w_shift
        u = s @ self.u_map.T + self.u_shift + theta @ self.type_loading.T
        scores = w
        if self.deployment_noise > 0:
            scores = w + self.deployment_noise * rng.standard_normal(w.shape)
        offset = (
            np.zeros(n_samples)
            if self.welfare_offset is None
            else self.welfare_offset(s)
        )
        omega_w, omega_u = self.fixed_weights
        return DrawBatch(
            training_state=s,
            deployment_scores=scores,
            mu=np.broadcast_to(self.mu, (n_samples, self.n)),
            agent_type=theta,
            w=w,
            u=u,
            omega_w=omega_w,
            omega_u=omega_u,
            welfare_offset=offset,
        )

    def moments(self) -> Moments:
        stack = np.vstack([self.w_map, self.u_map])
        mean = stack @ self.state_mean + np.concatenate([self.w_shift, self.u_shift])
        cov = stack @ self.state_cov @ stack.T
        t = self.type_loading
        cov[self.n :, self.n :] += t @ t.T
        offset = (
            0.0
            if self.welfare_offset is None
            else self.welfare_offset.mean(self.state_mean, self.state_cov)
        )
        return Moments(mean, symmetrize(cov), offset)


class MixtureScenario(ScenarioDistribution):
    """Finite support over states; each component fixes both objectives."""

    def __init__(
        self,
        components: Sequence[tuple[float, QuadraticObjective, QuadraticObjective]],
        mu=None,
    ):
        if not components:
            raise ValueError("mixture needs at least one component")
        probs = np.array([c[0] for c in components], dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-8:
            raise ValueError("component probabilities must be non-negative and sum to 1")
        self.probs = probs / probs.sum()
        self.principals = [c[1] for c in components]
        self.agents = [c[2] for c in components]
        self.n = self.principals[0].n
        if any(o.n != self.n for o in self.principals + self.agents):
            raise ValueError("all component objectives must share dimension n")
        self.mu = np.full(self.n, 1.0 / self.n) if mu is None else as_vector(mu)
        self._w = np.array([o.bliss for o in self.principals])
        self._u = np.array([o.bliss for o in self.agents])
        self._ow = np.array([o.weight for o in self.principals])
        self._ou = np.array([o.weight for o in self.agents])
        same_w = np.allclose(self._ow, self._ow[0], atol=0, rtol=0)
        same_u = np.allclose(self._ou, self._ou[0], atol=0, rtol=0)
        self.fixed_weights = (self._ow[0], self._ou[0]) if same_w and same_u else None

    def _sample(self, rng, n_samples):
        idx = rng.choice(len(self.probs), size=n_samples, p=self.probs)
        if self.fixed_weights is not None:
            omega_w, omega_u = self.fixed_weights
        else:
            omega_w, omega_u = self._ow[idx], self._ou[idx]
        return DrawBatch(
            training_state=idx[:, None].astype(float),
            deployment_scores=self._w[idx],
            mu=np.broadcast_to(self.mu, (n_samples, self.n)),
            agent_type=np.zeros((n_samples, 0)),
            w=self._w[idx],
            u=self._u[idx],
            omega_w=omega_w,
            omega_u=omega_u,
            welfare_offset=np.zeros(n_samples),
        )

    def support(self) -> DrawBatch:
        """Every component once, in order (for exact expectations)."""
        k = len(self.probs)
        omega_w, omega_u = (
            self.fixed_weights if self.fixed_weights is not None else (self._ow, self._ou)
        )
        return DrawBatch(
            training_state=np.arange(k, dtype=float)[:, None],
            deployment_scores=self._w,
            mu=np.broadcast_to(self.mu, (k, self.n)),
            agent_type=np.zeros((k, 0)),
            w=self._w,
            u=self._u,
            omega_w=omega_w,
            omega_u=omega_u,
            welfare_offset=np.zeros(k),
        )

    def moments(self) -> Moments:
        joint = np.hstack([self._w, self._u])
        mean = self.probs @ joint
        centred = joint - mean
        cov = (centred * self.probs[:, None]).T @ centred
        return Moments(mean, symmetrize(cov))


@dataclass(frozen=True)
class MisalignmentMoments:
    var_w: np.ndarray
    m2_gap: np.ndarray
    rank_gap: int
    mean_w: np.ndarray = field(repr=False)
    mean_gap: np.ndarray = field(repr=False)
    analytic: bool = False


def misalignment_moments(
    dist: ScenarioDistribution, n_samples: int = 10_000, seed: int = 0
) -> MisalignmentMoments:
    """Var_pi(w_bar), E_pi[(u_bar - w_bar)(u_bar - w_bar)'] and the rank of the latter.

    Uses the analytic moments when the distribution provides them.
    """
    mom = dist.moments()
    if mom is not None:
        var_w, m2, mean_w, mean_gap = mom.var_w, mom.m2_gap, mom.mean_w, mom.mean_gap
        analytic = True
    else:
        if n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        batch = dist.sample(n_samples, seed)
        if len(batch) == 0:
            raise ValueError("sampler produced no draws")
        gap = batch.u - batch.w
        var_w = np.atleast_2d(np.cov(batch.w, rowvar=False, ddof=1))
        m2 = gap.T @ gap / len(batch)
        mean_w, mean_gap = batch.w.mean(axis=0), gap.mean(axis=0)
        analytic = False
    m2 = symmetrize(m2)
    return MisalignmentMoments(
        var_w=symmetrize(var_w),
        m2_gap=m2,
        rank_gap=numerical_rank(m2, RANK_RTOL),
        mean_w=mean_w,
        mean_gap=mean_gap,
        analytic=analytic,
    )


def _signal_summary(f: np.ndarray, scores: np.ndarray, mu: np.ndarray, cells) -> np.ndarray:
    mask = np.zeros(scores.shape[-1], dtype=bool)
    if cells is None:
        mask[:] = True
    else:
        mask[list(cells)] = True
    m = mu * mask
    return np.sum(m * (scores - f), axis=-1) / np.sum(m, axis=-1)


def realize_signal(
    f,
    draw: ScenarioDraw,
    noise_model: NoiseModel,
    seed: int,
    cells: Sequence[int] | None = None,
) -> PublicSignal:
    """Public signal g(f; d): mu-weighted mean of realised minus predicted score
    over ``cells`` (all cells by default), plus noise drawn independently of f."""
    f = as_vector(f)
    if f.size != draw.deployment_scores.size:
        raise ValueError(
            f"f has length {f.size}, deployment state has {draw.deployment_scores.size} cells"
        )
    summary = float(_signal_summary(f, draw.deployment_scores, draw.mu, cells))
    rng = np.random.default_rng(seed)
    return PublicSignal(summary + float(noise_model.sample(rng, None)), noise_model)


def signal_batch(
    f: np.ndarray,
    batch: DrawBatch,
    noise_model: NoiseModel,
    rng: np.random.Generator,
    cells: Sequence[int] | None = None,
) -> np.ndarray:
    """Vectorised ``realize_signal`` over a batch; ``f`` is (n,) or (N, n)."""
    f = np.broadcast_to(np.asarray(f, dtype=float), batch.deployment_scores.shape)
    summary = _signal_summary(f, batch.deployment_scores, batch.mu, cells)
    return summary + noise_model.sample(rng, summary.shape)


# JSON documents ----------------------------------------------------------------


def _objective_from_json(doc: dict, n: int) -> QuadraticObjective:
    obj = QuadraticObjective(doc["bliss"], doc["weight"])
    if obj.n != n:
        raise ValueError(f"objective dimension {obj.n} does not match n={n}")
    return obj


def distribution_from_dict(doc: dict) -> ScenarioDistribution:
    """Build a distribution from the JSON schema described in the README."""
    kind = doc.get("kind", "mixture")
    if kind == "mixture":
        n = int(doc["n"])
        comps = [
            (
                float(c["probability"]),
                _objective_from_json(c["principal"], n),
                _objective_from_json(c["agent"], n),
            )
            for c in doc["components"]
        ]
        return MixtureScenario(comps, mu=doc.get("mu"))
    if kind == "generator":
        name = doc["name"]
        params = dict(doc.get("params", {}))
        if name == "linear_gaussian":
            n = int(doc["n"])
            dist = LinearGaussianScenario(**params)
            if dist.n != n:
                raise ValueError(f"generator dimension {dist.n} does not match n={n}")
            return dist
        if name == "two_variable":
            from auditgame.closed_form import TwoVarParams, embed_as_general

            scenario = params.pop("scenario", "lending")
            return embed_as_general(TwoVarParams(**params), scenario).dist
        raise ValueError(f"unknown generator {name!r}")
    raise ValueError(f"unknown distribution kind {kind!r}")


def load_distribution(path: str | Path) -> ScenarioDistribution:
    with open(path) as fh:
        return distribution_from_dict(json.load(fh))
