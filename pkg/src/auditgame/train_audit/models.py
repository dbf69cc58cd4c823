"""Logistic regression and two-hidden-layer networks on a flat parameter vector."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROB_CLAMP = 1e-12
LOGIT_CLIP = float(np.log((1 - PROB_CLAMP) / PROB_CLAMP))

_ACT = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda x: np.maximum(x, 0.0), lambda a: (a > 0).astype(float)),
}


@dataclass
class PredictorModel:
    """``arch`` is ``"logistic"`` or ``"mlp"``.  ``input_cols`` selects the
    dataset columns the model sees (all columns when None)."""

    arch: str
    n_in: int
    params: np.ndarray
    hidden: tuple[int, ...] = (40, 40)
    activation: str = "tanh"
    input_cols: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ("logistic", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "logistic":
            self.hidden = ()
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.size}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.n_in, *self.hidden, 1]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def unpack(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = self.params if params is None else params
        out, pos = [], 0
        sizes = self.layer_sizes
        for a, b in zip(sizes[:-1], sizes[1:]):
            W = theta[pos : pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, theta[pos : pos + b]))
            pos += b
        return out

    def inputs(self, X: np.ndarray) -> np.ndarray:
        return X if self.input_cols is None else X[:, list(self.input_cols)]

    def forward(self, X: np.ndarray, params: np.ndarray | None = None):
        """Unclipped logits and the layer activations needed by ``backward``."""
        act, _ = _ACT[self.activation]
        layers = self.unpack(params)
        a = self.inputs(X)
        acts = [a]
        for W, b in layers[:-1]:
            a = act(a @ W + b)
            acts.append(a)
        W, b = layers[-1]
        return (a @ W + b)[:, 0], acts

    def logits(self, X: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        """Logit scores, clipped so probabilities stay 1e-12 away from 0 and 1."""
        return np.clip(self.forward(X, params)[0], -LOGIT_CLIP, LOGIT_CLIP)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.logits(X)))
        return np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)

    def backward(self, X: np.ndarray, dz: np.ndarray, params: np.ndarray | None = None, trace=None) -> np.ndarray:
        """Parameter gradient given d(objective)/d(clipped logit) per row.

        ``trace`` is the output of ``forward`` at the same inputs, if available.
        """
        z, acts = self.forward(X, params) if trace is None else trace
        dz = np.where(np.abs(z) < LOGIT_CLIP, dz, 0.0)
        _, dact = _ACT[self.activation]
        layers = self.unpack(params)
        grads = []
        delta = dz[:, None]
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            a_prev = acts[li]
            grads.append((a_prev.T @ delta, delta.sum(axis=0)))
            if li > 0:
                delta = (delta @ W.T) * dact(a_prev)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat)

    def copy(self, params: np.ndarray | None = None) -> "PredictorModel":
        return PredictorModel(
            self.arch,
            self.n_in,
            self.params.copy() if params is None else np.asarray(params, dtype=float).copy(),
            self.hidden,
            self.activation,
            self.input_cols,
            self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "n_in": self.n_in,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "input_cols": None if self.input_cols is None else list(self.input_cols),
            "seed": self.seed,
            "params": [format(v, ".17g") for v in self.params],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PredictorModel":
        return cls(
            doc["arch"],
            int(doc["n_in"]),
            np.array([float(v) for v in doc["params"]]),
            tuple(doc.get("hidden", ())),
            doc.get("activation", "tanh"),
            None if doc.get("input_cols") is None else tuple(doc["input_cols"]),
            int(doc.get("seed", 0)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "PredictorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_model(
    arch: str,
    n_in: int,
    seed: int = 0,
    hidden: tuple[int, ...] = (40, 40),
    activation: str = "tanh",
    input_cols: tuple[int, ...] | None = None,
    intercept: float = 0.0,
) -> PredictorModel:
    """Glorot-uniform weights, zero biases; the output bias starts at ``intercept``."""
    if input_cols is not None:
        n_in = len(input_cols)
    sizes = [n_in, *(hidden if arch == "mlp" else ()), 1]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    parts = []
    for li, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if arch == "logistic":
            W = np.zeros((a, b))
        else:
            lim = np.sqrt(6.0 / (a + b))
            W = rng.uniform(-lim, lim, size=(a, b))
        bias = np.zeros(b)
        if li == len(sizes) - 2:
            bias[:] = intercept
        parts += [W.ravel(), bias]
    return PredictorModel(arch, n_in, np.concatenate(parts), tuple(hidden) if arch == "mlp" else (), activation, input_cols, seed)
