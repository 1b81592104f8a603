"""Training objectives: weighted cross-entropy, teacher-student contrast,
Barlow-style head decorrelation and the warm-up gated total."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STANDARDIZE_EPS = 1e-5


@dataclass
class LossBreakdown:
    class_loss: float
    contrast_loss: float
    diversity_loss: float
    total: float
    lambda_contrast_effective: float
    lambda_div_effective: float
    tensor: Tensor | None = None

    def record(self, epoch: int) -> dict:
        return {
            "epoch": epoch,
            "class": self.class_loss,
            "contrast": self.contrast_loss,
            "diversity": self.diversity_loss,
            "total": self.total,
            "lambda_contrast_eff": self.lambda_contrast_effective,
            "lambda_div_eff": self.lambda_div_effective,
        }


def class_weights(train_labels) -> np.ndarray:
    """Inverse class frequency, normalised so the two weights average 1."""
    train_labels = np.asarray(train_labels)
    counts = np.array([np.sum(train_labels == 0), np.sum(train_labels == 1)], dtype=np.float64)
    if np.any(counts == 0):
        return np.ones(2)
    inv = counts.sum() / counts
    return inv / inv.mean()


def weighted_cross_entropy(logits: Tensor, labels, weights, mask) -> Tensor:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if mask.size == 0:
        raise ValueError("cross-entropy mask is empty")
    labels = np.asarray(labels)[mask]
    logp = ad.log_softmax(ad.getitem(logits, mask), axis=1)
    target = np.zeros((mask.size, 2))
    target[np.arange(mask.size), labels] = np.asarray(weights)[labels]
    return ad.scalar_mul(ad.sum(ad.mul(logp, target)), -1.0 / mask.size)


def _pool(z) -> Tensor:
    return ad.mean(z, axis=0, keepdims=True)


def tsc_loss(student_heads: list, teacher_heads: list, tau: float = 0.5, pooled: bool = False) -> Tensor:
    """Per-node InfoNCE over heads: student head i must pick teacher head i.

    Returns the mean over nodes of the sum over heads; with ``pooled`` the
    heads are first mean-pooled over nodes into one vector each.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    H = len(student_heads)
    if len(teacher_heads) != H:
        raise ValueError("student and teacher head counts differ")
    students = [_pool(z) if pooled else ad.as_tensor(z) for z in student_heads]
    teachers = []
    for z in teacher_heads:
        z = Tensor(z.data if isinstance(z, Tensor) else z)
        teachers.append(_pool(z) if pooled else z)
    s_norm = [ad.l2_normalize_rows(z) for z in students]
    t_norm = [ad.l2_normalize_rows(z) for z in teachers]
    total = None
    for i in range(H):
        sims = ad.concat([ad.sum(ad.mul(s_norm[i], t_norm[j]), axis=1, keepdims=True) for j in range(H)], axis=1)
        term = ad.log_softmax(ad.scalar_mul(sims, 1.0 / tau), axis=1)[:, i]
        total = term if total is None else ad.add(total, term)
    return ad.scalar_mul(ad.mean(total), -1.0)


def infonce_from_similarities(sims: np.ndarray, tau: float) -> float:
    """Per-node loss for an explicit H x H cosine-similarity matrix."""
    logits = np.asarray(sims, dtype=np.float64) / tau
    t = ad.log_softmax(Tensor(logits), axis=1).data
    return float(-np.trace(t))


def head_correlation(student_heads: list, params: dict, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Cross-correlation C (D' x D') of projected, column-standardised heads."""
    n = student_heads[0].shape[0]
    if n < 2:
        raise ValueError("correlation needs at least two nodes")
    blocks = [
        ad.batch_standardize_columns(ad.matmul(z, params[f"proj{h}.w"]), eps)
        for h, z in enumerate(student_heads)
    ]
    zb = ad.concat(blocks, axis=1)
    return ad.scalar_mul(ad.matmul(ad.transpose(zb), zb), 1.0 / n)


def barlow_objective(corr) -> Tensor:
    """sum_ij (C_ij - I_ij)^2 with on- and off-diagonal terms weighted equally."""
    corr = ad.as_tensor(corr)
    diff = ad.sub(corr, np.eye(corr.shape[0]))
    return ad.sum(ad.mul(diff, diff))


def btd_loss(student_heads: list, params: dict, eps: float = STANDARDIZE_EPS) -> Tensor:
    return barlow_objective(head_correlation(student_heads, params, eps))


def between_head_correlation(corr: np.ndarray, heads: int) -> float:
    """Mean |C_ij| over entries whose row and column belong to different heads."""
    corr = np.asarray(corr)
    d = corr.shape[0] // heads
    owner = np.repeat(np.arange(heads), d)
    between = owner[:, None] != owner[None, :]
    return float(np.abs(corr[between]).mean())


def total_loss(
    class_loss,
    contrast_loss,
    diversity_loss,
    lambda_contrast: float = 0.1,
    lambda_div: float = 0.05,
    epoch: int = 0,
    warmup_epochs: int = 5,
) -> LossBreakdown:
    """Warm-up gated composite; contrast weight is 0 while ``epoch < warmup_epochs``.

    Accepts Tensors (the result keeps a differentiable ``tensor``) or floats.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    lam_c = 0.0 if epoch < warmup_epochs else float(lambda_contrast)
    lam_d = float(lambda_div)
    parts = [ad.as_tensor(x) for x in (class_loss, contrast_loss, diversity_loss)]
    total = parts[0]
    if lam_c != 0.0:
        total = ad.add(total, ad.scalar_mul(parts[1], lam_c))
    if lam_d != 0.0:
        total = ad.add(total, ad.scalar_mul(parts[2], lam_d))
    values = [p.item() for p in parts]
    return LossBreakdown(
        class_loss=values[0],
        contrast_loss=values[1],
        diversity_loss=values[2],
        total=total.item(),
        lambda_contrast_effective=lam_c,
        lambda_div_effective=lam_d,
        tensor=total,
    )
