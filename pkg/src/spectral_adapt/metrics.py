"""Ranking and classification metrics plus the trimmed-mean run aggregate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

SWEEP_POINTS = 51


@dataclass
class EvalResult:
    auc: float
    f1_macro: float
    threshold: float
    split: str
    threshold_mode: str = "argmax"

    def to_dict(self) -> dict:
        return asdict(self)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_macro(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("f1_macro needs at least one prediction")
    scores = []
    for cls in (0, 1):
        tp = np.sum((predictions == cls) & (labels == cls))
        fp = np.sum((predictions == cls) & (labels != cls))
        fn = np.sum((predictions != cls) & (labels == cls))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


def best_threshold(probs, labels, points: int = SWEEP_POINTS) -> float:
    """Threshold on P(anomaly) maximising F1-macro; ties keep the smallest."""
    grid = np.linspace(0.0, 1.0, points)
    scores = [f1_macro((probs >= t).astype(int), labels) for t in grid]
    return float(grid[int(np.argmax(scores))])


def evaluate(logits: np.ndarray, labels, nodes, split: str, threshold: float | None = None) -> EvalResult:
    """Score nodes by softmax P(anomaly); predict by argmax unless ``threshold`` is given."""
    z = logits[nodes]
    z = z - z.max(axis=1, keepdims=True)
    probs = np.exp(z[:, 1]) / np.exp(z).sum(axis=1)
    y = np.asarray(labels)[nodes]
    if threshold is None:
        preds = (z[:, 1] > z[:, 0]).astype(int)
        mode, thr = "argmax", 0.5
    else:
        preds = (probs >= threshold).astype(int)
        mode, thr = "sweep", float(threshold)
    return EvalResult(auc=auc(probs, y), f1_macro=f1_macro(preds, y), threshold=thr, split=split, threshold_mode=mode)


def trimmed_mean(values) -> float:
    """Mean after dropping one maximum and one minimum."""
    values = sorted(float(v) for v in values)
    if len(values) < 3:
        raise ValueError("trimmed mean needs at least 3 values")
    return float(np.mean(values[1:-1]))


@dataclass
class RunAggregate:
    runs: list[EvalResult]
    seeds: list[int] = field(default_factory=list)

    @property
    def auc(self) -> float:
        return trimmed_mean([r.auc for r in self.runs])

    @property
    def f1_macro(self) -> float:
        return trimmed_mean([r.f1_macro for r in self.runs])

    def to_dict(self) -> dict:
        return {
            "trimmed_auc": self.auc,
            "trimmed_f1_macro": self.f1_macro,
            "seeds": list(self.seeds),
            "runs": [r.to_dict() for r in self.runs],
        }

    def table(self, name: str = "") -> str:
        return f"{name:<24s} {self.auc:8.4f} {self.f1_macro:8.4f} {len(self.runs):5d}"
