"""Adam on the training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from auditgame.datagen import Dataset
from auditgame.train_audit.models import PredictorModel, init_model
from auditgame.train_audit.objective import Objective, ObjectiveParts, TrainSpec


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class FitResult:
    model: PredictorModel
    history: list[float] = field(default_factory=list)
    best_epoch: int = 0
    initial: ObjectiveParts | None = None
    final: ObjectiveParts | None = None


class Adam:
    def __init__(self, size: int, step: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.step = step
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return params - self.step * m_hat / (np.sqrt(v_hat) + self.eps)


def initial_model(spec: TrainSpec, train: Dataset) -> PredictorModel:
    rate = float(np.clip(train.y.mean(), 1e-6, 1 - 1e-6))
    return init_model(
        spec.arch,
        train.X.shape[1],
        seed=spec.seed,
        hidden=spec.hidden,
        activation=spec.activation,
        input_cols=spec.input_cols,
        intercept=float(logit(rate)),
    )


def _decay_mask(model: PredictorModel) -> np.ndarray:
    mask = []
    for W, b in model.unpack():
        mask += [np.ones(W.size), np.zeros(b.size)]
    return np.concatenate(mask)


def fit(
    spec: TrainSpec,
    train: Dataset,
    init: PredictorModel | None = None,
    callback=None,
) -> FitResult:
    """Minimise the objective with Adam.

    Mini-batches are drawn in a fixed per-seed shuffle order; the group gap
    and the explanation entering the penalty gradients are refreshed on the
    full training set at the start of each epoch.  The parameters with the
    lowest full-data objective seen at an epoch boundary are returned, so the
    result never scores worse than the starting point.  ``weight_decay``
    adds an L2 pull on the weights inside the update only; it is not part of
    the reported objective.  ``callback(epoch, model)`` runs after each epoch.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    model = initial_model(spec, train) if init is None else init.copy()
    obj = Objective(spec, model, train)
    params = model.params.copy()
    opt = Adam(params.size, spec.step_size, spec.betas)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 13]))
    n = len(train)
    decay = spec.weight_decay * _decay_mask(model) if spec.weight_decay > 0 else None

    stats = obj.value(params)
    initial = stats
    best_val, best_params, best_epoch = stats.total, params.copy(), 0
    history = [stats.total]
    for epoch in range(1, spec.epochs + 1):
        if spec.batch_size is None or spec.batch_size >= n:
            stats, grad = obj.value_and_grad(params)
            if decay is not None:
                grad = grad + decay * params
            params = opt.update(params, grad)
        else:
            order = rng.permutation(n)
            for start in range(0, n, spec.batch_size):
                idx = np.sort(order[start : start + spec.batch_size])
                grad = obj.batch_grad(params, idx, stats)
                if decay is not None:
                    grad = grad + decay * params
                params = opt.update(params, grad)
        stats = obj.value(params)
        if not math.isfinite(stats.total) or not np.all(np.isfinite(params)):
            raise TrainingDivergence(
                f"objective became {stats.total} at epoch {epoch} "
                f"(loss={stats.loss}, M={stats.misalign}, N={stats.penalty}); "
                f"try a smaller step size than {spec.step_size}"
            )
        history.append(stats.total)
        if callback is not None:
            callback(epoch, model.copy(params))
        if stats.total < best_val:
            best_val, best_params, best_epoch = stats.total, params.copy(), epoch
    model = model.copy(best_params)
    return FitResult(model, history, best_epoch, initial, obj.value(best_params))
