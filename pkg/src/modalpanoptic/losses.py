"""Training objectives as pure scalar functions with analytic gradients.

Every loss returns both its value and the exact gradient with respect to the
prediction input, so the whole stack can be verified against central finite
differences without an autograd framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import IGNORE_CLASS

PROB_EPS = 1e-6
FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0


@dataclass(frozen=True)
class LossValue:
    value: float
    gradient: np.ndarray
    count: int = 0  # elements that contributed; 0 flags an empty reduction

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("loss value is not finite")
        if not np.all(np.isfinite(self.gradient)):
            raise ValueError("loss gradient is not finite")


def _clamped(pred: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    clipped = np.clip(p, lo, hi)
    inside = (p > lo) & (p < hi)  # gradient flows only where the clamp is inactive
    return clipped, inside


def focal_loss(
    pred: np.ndarray,
    target: np.ndarray,
    alpha: float = FOCAL_ALPHA,
    beta: float = FOCAL_BETA,
    eps: float = PROB_EPS,
) -> LossValue:
    """Penalty-reduced focal loss over center heatmaps.

    Cells where the target is exactly 1 contribute -(1-p)^alpha log p, all
    others -(1-y)^beta p^alpha log(1-p); the sum is normalized by the number
    of peak cells (at least 1 so instance-free maps stay defined).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if target.min(initial=0.0) < 0 or target.max(initial=0.0) > 1:
        raise ValueError("targets must lie in [0, 1]")
    p, inside = _clamped(pred, eps, 1.0 - eps)
    peak = target == 1.0
    npeak = max(int(peak.sum()), 1)
    one_minus_p = 1.0 - p
    pos = -(one_minus_p ** alpha) * np.log(p)
    neg = -((1.0 - target) ** beta) * (p ** alpha) * np.log(one_minus_p)
    value = float(np.where(peak, pos, neg).sum() / npeak)
    dpos = alpha * (one_minus_p ** (alpha - 1.0)) * np.log(p) - (one_minus_p ** alpha) / p
    dneg = ((1.0 - target) ** beta) * (
        (p ** alpha) / one_minus_p - alpha * (p ** (alpha - 1.0)) * np.log(one_minus_p)
    )
    grad = np.where(peak, dpos, dneg) * inside / npeak
    return LossValue(value, grad, count=int(pred.size))


def masked_cross_entropy(
    logits: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray | None = None,
    ignore_class: int = IGNORE_CLASS,
) -> LossValue:
    """Mean softmax cross-entropy over masked, non-ignore voxels.

    Masked-out voxels contribute zero value and zero gradient. When nothing
    survives the mask the value is 0 by convention, flagged by count == 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    if logits.ndim != 2:
        raise ValueError("logits must be (V, K)")
    if target.shape != (logits.shape[0],):
        raise ValueError("target must be (V,)")
    nclass = logits.shape[1]
    counted = target != ignore_class
    if mask is not None:
        counted = counted & np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(counted)
    if target[idx].size and (target[idx].min() < 0 or target[idx].max() >= nclass):
        raise ValueError("target class id outside the logit channels")
    grad = np.zeros_like(logits)
    if idx.size == 0:
        return LossValue(0.0, grad, count=0)
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(idx.size)
    value = float((logsumexp - z[rows, target[idx]]).mean())
    softmax = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    softmax[rows, target[idx]] -= 1.0
    grad[idx] = softmax / idx.size
    return LossValue(value, grad, count=int(idx.size))


def l1_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> LossValue:
    """Mean absolute error over masked entries; subgradient 0 at the kink."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if mask is None:
        sel = np.ones(pred.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == pred.ndim - 1:
            m = m[..., None]  # per-cell mask over a vector-valued target
        sel = np.broadcast_to(m, pred.shape)
    n = int(sel.sum())
    if n == 0:
        raise ValueError("empty mask")
    diff = np.where(sel, pred - target, 0.0)
    value = float(np.abs(diff).sum() / n)
    grad = np.sign(diff) / n
    return LossValue(value, grad, count=n)


def bce_loss(pred: np.ndarray, target: np.ndarray, eps: float = PROB_EPS) -> LossValue:
    """Mean binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    n = max(pred.size, 1)
    p, inside = _clamped(pred, eps, 1.0 - eps)
    value = float(-(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).sum() / n)
    grad = (p - target) / (p * (1.0 - p)) * inside / n
    return LossValue(value, grad, count=int(pred.size))


def total_loss(parts: dict[str, float], weights: dict[str, float] | None = None) -> float:
    """Sum of the detection, segmentation, membership and tracking terms.

    The tracking term may be absent in single-scan mode and counts as 0;
    weights default to 1 for every term.
    """
    known = ("det", "seg", "mem", "track")
    for key in parts:
        if key not in known:
            raise ValueError(f"unknown loss part {key!r}")
    total = 0.0
    for key in known:
        if key not in parts:
            if key == "track":
                continue
            raise ValueError(f"missing loss part {key!r}")
        value = float(parts[key])
        if not np.isfinite(value):
            raise ValueError(f"loss part {key!r} is not finite")
        w = 1.0 if weights is None else float(weights.get(key, 1.0))
        total += w * value
    return total
