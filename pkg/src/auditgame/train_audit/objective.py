"""Training objective ``L + lambda M + eta N`` and its gradient.

* L: mean negative log-likelihood.
* M: squared gap in mean logit score between the two levels of a group label.
* N: squared distance between the least-squares explanation of the logit
  scores on (intercept, X_J) and reference coefficients.

The explanation is ``H z`` with the fixed hat factor ``H = (D'D)^{-1} D'``,
so its derivative with respect to the scores is exactly ``H``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from auditgame.datagen import Dataset
from auditgame.train_audit.models import LOGIT_CLIP, PROB_CLAMP, PredictorModel


@dataclass(frozen=True)
class TrainSpec:
    lambda_misalign: float = 0.0
    eta_explainer: float = 0.0
    explainer_vars: tuple[int, ...] = ()
    reference_coeffs: tuple[float, ...] | None = None
    misalign_group: str = "minority"
    step_size: float = 1e-3
    batch_size: int | None = 256  # None: full batch
    epochs: int = 200
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    arch: str = "mlp"
    hidden: tuple[int, ...] = (40, 40)
    activation: str = "tanh"
    input_cols: tuple[int, ...] | None = None
    weight_decay: float = 0.0  # L2 on weights, applied by the optimiser only

    def __post_init__(self):
        if self.lambda_misalign < 0 or self.eta_explainer < 0:
            raise ValueError("multipliers must be non-negative")
        if self.eta_explainer > 0:
            if not self.explainer_vars:
                raise ValueError("eta > 0 needs explainer variables")
            if self.reference_coeffs is None or len(self.reference_coeffs) != len(self.explainer_vars) + 1:
                raise ValueError("reference_coeffs needs one intercept plus one coefficient per variable")
        if len(set(self.explainer_vars)) != len(self.explainer_vars):
            raise ValueError("explainer variables must be distinct")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")


class ExplanationDesign:
    """Least-squares explanation on an intercept plus columns J."""

    def __init__(self, X: np.ndarray, J):
        J = [int(j) for j in J]
        if any(j < 0 or j >= X.shape[1] for j in J):
            raise ValueError(f"explainer columns {J} out of range for {X.shape[1]} columns")
        if len(J) + 1 >= X.shape[0]:
            raise ValueError("explainer needs more rows than variables")
        D = np.column_stack([np.ones(X.shape[0]), X[:, J]])
        Q, R = np.linalg.qr(D)
        diag = np.abs(np.diag(R))
        if diag.min() <= 1e-10 * diag.max():
            raise ValueError("explainer design is rank deficient")
        self.J = tuple(J)
        self.H = np.linalg.solve(R, Q.T)  # (|J|+1, n)

    def coefficients(self, z: np.ndarray) -> np.ndarray:
        return self.H @ z


def _check_two_groups(g: np.ndarray) -> tuple[np.ndarray, int, int]:
    g = np.asarray(g).astype(bool)
    n1 = int(g.sum())
    n0 = g.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both groups must be present")
    return g, n1, n0


# value functions on scores ------------------------------------------------------------


def log_loss_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    z = np.clip(z, -LOGIT_CLIP, LOGIT_CLIP)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def log_loss(y, prob) -> float:
    """Mean negative log-likelihood with probabilities clamped 1e-12 from the edges."""
    p = np.clip(np.asarray(prob, dtype=float), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty data")
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def group_gap(z: np.ndarray, g) -> float:
    g, _, _ = _check_two_groups(g)
    return float(z[g].mean() - z[~g].mean())


# model-level terms --------------------------------------------------------------------


def predictive_loss(model: PredictorModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty data")
    return log_loss_from_logits(model.logits(data.X), data.y)


def misalignment_term(model: PredictorModel, data: Dataset, group: str = "minority") -> float:
    return group_gap(model.logits(data.X), data.group(group)) ** 2


def explainer_penalty(model: PredictorModel, data: Dataset, J, reference_coeffs) -> float:
    design = ExplanationDesign(data.X, J)
    beta = design.coefficients(model.logits(data.X))
    ref = np.asarray(reference_coeffs, dtype=float)
    return float(np.sum((beta - ref) ** 2))


@dataclass
class ObjectiveParts:
    total: float
    loss: float
    misalign: float
    penalty: float
    gap: float = 0.0
    beta: np.ndarray | None = field(default=None, repr=False)


class Objective:
    """Objective and gradient for one training set.

    ``value_and_grad(params)`` uses all rows.  ``batch_grad`` uses rows ``idx``
    for the loss and the per-row Jacobians of M and N, scaled by n/|B|, while
    the group gap and explanation are taken from ``stats`` computed on the
    full data (refreshed by the caller once per epoch).
    """

    def __init__(self, spec: TrainSpec, model: PredictorModel, data: Dataset):
        self.spec = spec
        self.model = model
        self.X = data.X
        self.y = data.y.astype(float)
        self.n = len(data)
        self.use_m = spec.lambda_misalign > 0
        self.use_n = spec.eta_explainer > 0
        if self.use_m:
            g, n1, n0 = _check_two_groups(data.group(spec.misalign_group))
            self.m_weights = np.where(g, 1.0 / n1, -1.0 / n0)
        if self.use_n:
            self.design = ExplanationDesign(data.X, spec.explainer_vars)
            self.ref = np.asarray(spec.reference_coeffs, dtype=float)

    def parts_from_logits(self, z: np.ndarray) -> ObjectiveParts:
        loss = log_loss_from_logits(z, self.y)
        gap = float(self.m_weights @ z) if self.use_m else 0.0
        misalign = gap * gap
        beta = self.design.coefficients(z) if self.use_n else None
        penalty = float(np.sum((beta - self.ref) ** 2)) if self.use_n else 0.0
        total = loss + self.spec.lambda_misalign * misalign + self.spec.eta_explainer * penalty
        return ObjectiveParts(total, loss, misalign, penalty, gap, beta)

    def value(self, params: np.ndarray) -> ObjectiveParts:
        return self.parts_from_logits(self.model.logits(self.X, params))

    def _dz(self, z: np.ndarray, y: np.ndarray, idx, gap: float, beta, scale: float) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-z))
        dz = (p - y) / z.size
        if self.use_m:
            w = self.m_weights if idx is None else self.m_weights[idx]
            dz = dz + self.spec.lambda_misalign * 2.0 * gap * w * scale
        if self.use_n:
            H = self.design.H if idx is None else self.design.H[:, idx]
            dz = dz + self.spec.eta_explainer * 2.0 * ((beta - self.ref) @ H) * scale
        return dz

    def value_and_grad(self, params: np.ndarray) -> tuple[ObjectiveParts, np.ndarray]:
        trace = self.model.forward(self.X, params)
        z = np.clip(trace[0], -LOGIT_CLIP, LOGIT_CLIP)
        parts = self.parts_from_logits(z)
        dz = self._dz(z, self.y, None, parts.gap, parts.beta, 1.0)
        return parts, self.model.backward(self.X, dz, params, trace)

    def batch_grad(self, params: np.ndarray, idx: np.ndarray, stats: ObjectiveParts) -> np.ndarray:
        Xb = self.X[idx]
        trace = self.model.forward(Xb, params)
        z = np.clip(trace[0], -LOGIT_CLIP, LOGIT_CLIP)
        dz = self._dz(z, self.y[idx], idx, stats.gap, stats.beta, self.n / idx.size)
        return self.model.backward(Xb, dz, params, trace)

    def component_grads(self, params: np.ndarray) -> dict[str, np.ndarray]:
        """Separate full-data gradients of L, M and N (for checking)."""
        z = self.model.logits(self.X, params)
        p = 1.0 / (1.0 + np.exp(-z))
        out = {"L": self.model.backward(self.X, (p - self.y) / self.n, params)}
        if self.use_m:
            gap = float(self.m_weights @ z)
            out["M"] = self.model.backward(self.X, 2.0 * gap * self.m_weights, params)
        if self.use_n:
            beta = self.design.coefficients(z)
            out["N"] = self.model.backward(self.X, 2.0 * (beta - self.ref) @ self.design.H, params)
        return out

    def component_values(self, params: np.ndarray) -> dict[str, float]:
        parts = self.value(params)
        out = {"L": parts.loss}
        if self.use_m:
            out["M"] = parts.misalign
        if self.use_n:
            out["N"] = parts.penalty
        return out


def gradient(spec: TrainSpec, model: PredictorModel, batch: Dataset) -> np.ndarray:
    """Gradient of the full objective on ``batch`` at the model's parameters."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return Objective(spec, model, batch).value_and_grad(model.params)[1]


def objective_value(spec: TrainSpec, model: PredictorModel, data: Dataset) -> float:
    return Objective(spec, model, data).value(model.params).total
