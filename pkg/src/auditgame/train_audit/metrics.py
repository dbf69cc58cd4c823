"""AUC, log loss, group log-odds gaps and report containers."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from auditgame.datagen import Dataset
from auditgame.train_audit.models import PredictorModel
from auditgame.train_audit.objective import ExplanationDesign, group_gap, log_loss_from_logits


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def delta_log_odds(model: PredictorModel, data: Dataset, group: str = "minority") -> float:
    """Mean logit score of group 1 minus group 0."""
    return group_gap(model.logits(data.X), data.group(group))


def extract_explanation(model: PredictorModel, data: Dataset, J) -> np.ndarray:
    """Least-squares coefficients of logit scores on (intercept, X_J)."""
    return ExplanationDesign(data.X, J).coefficients(model.logits(data.X))


@dataclass
class MetricsRow:
    case: str
    arch: str
    regime: str
    split: str
    auc: float
    log_loss: float
    delta_log_odds: float

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("auc must lie in [0, 1]")
        if self.log_loss < 0:
            raise ValueError("log loss must be non-negative")


def evaluate(model: PredictorModel, data: Dataset, group: str, case: str, arch: str, regime: str, split: str) -> MetricsRow:
    z = model.logits(data.X)
    return MetricsRow(
        case,
        arch,
        regime,
        split,
        auc(z, data.y),
        log_loss_from_logits(z, data.y),
        group_gap(z, data.group(group)),
    )


REPORT_COLUMNS = ("case", "arch", "regime", "split", "auc", "log_loss", "delta_log_odds")


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def find(self, case: str, arch: str, regime: str, split: str = "test") -> MetricsRow:
        for r in self.rows:
            if (r.case, r.arch, r.regime, r.split) == (case, arch, regime, split):
                return r
        raise KeyError((case, arch, regime, split))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                d = asdict(r)
                w.writerow([d[c] if isinstance(d[c], str) else format(d[c], ".17g") for c in REPORT_COLUMNS])

    @classmethod
    def read_csv(cls, path: str | Path) -> "MetricsReport":
        rows = []
        with open(path, newline="") as fh:
            for d in csv.DictReader(fh):
                rows.append(MetricsRow(d["case"], d["arch"], d["regime"], d["split"], float(d["auc"]), float(d["log_loss"]), float(d["delta_log_odds"])))
        return cls(rows)
