"""Cross-entropy, multi-class IoU loss and the weighted Segmentation Loss.

All losses take per-pixel rows: ``[K, C]`` arrays where every row is one
sample (pixel) and every column one class. Labels are 0-based class indices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, record

KINDS = ("cross_entropy", "iou", "segmentation")
VARIANTS = ("hinge", "linear")


@dataclass
class LossConfig:
    kind: str = "segmentation"
    variant: str = "linear"
    margin_g: float = 0.0
    include_background: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"loss.kind must be one of {KINDS}, got {self.kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"loss.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.margin_g < 0:
            raise ValueError("loss.margin_g must be non-negative")


@dataclass
class SoftRegionStats:
    """Per-class soft intersection/union and the derived sample weights.

    These are plain arrays; they never take part in differentiation.
    """

    intersection: np.ndarray
    union: np.ndarray
    w_pos: np.ndarray
    w_neg: np.ndarray

    def scaled(self, factor: float) -> SoftRegionStats:
        return SoftRegionStats(self.intersection, self.union, self.w_pos * factor,
                               self.w_neg * factor)


def _check_labels(labels: np.ndarray, k: int, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (k,):
        raise ShapeError(f"labels shape {labels.shape} does not match {k} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    k, c = logits.shape
    labels = _check_labels(labels, k, c)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(k)
    loss = float(np.mean(lse - z[rows, labels]))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / k),)

    return record("cross_entropy", np.asarray(loss), (logits,), vjp)


def _check_probs(probs: np.ndarray, onehot: np.ndarray) -> None:
    if probs.shape != onehot.shape or probs.ndim != 2:
        raise ShapeError(f"probs {probs.shape} and one-hot {onehot.shape} must be equal [K,C]")
    dev = np.abs(probs.sum(axis=1) - 1.0)
    if dev.size and dev.max() > 1e-6:
        raise ValueError(f"probability rows must sum to 1 (worst deviation {dev.max():.3g})")


def iou_loss_multiclass(probs: Tensor, onehot, classes=None) -> Tensor:
    """``1 - mean_t(sum_i p*gt / sum_i (p + gt - p*gt))`` over the selected classes.

    A class with zero union contributes a ratio of 1.
    """
    gt = np.asarray(onehot, dtype=np.float64)
    _check_probs(probs.data, gt)
    cols = np.arange(gt.shape[1]) if classes is None else np.asarray(classes)
    p = probs.data[:, cols]
    q = gt[:, cols]
    inter = (p * q).sum(axis=0)
    union = (p + q - p * q).sum(axis=0)
    live = union > 0
    safe = np.where(live, union, 1.0)
    ratio = np.where(live, inter / safe, 1.0)
    n = cols.size
    loss = 1.0 - ratio.mean()

    def vjp(g):
        # d ratio_t / d p_it = (gt_it * U_t - I_t * (1 - gt_it)) / U_t^2
        d = (q * safe - inter * (1.0 - q)) / (safe * safe)
        d = np.where(live, d, 0.0)
        full = np.zeros_like(probs.data)
        full[:, cols] = -(g / n) * d
        return (full,)

    return record("iou_loss", np.asarray(loss), (probs,), vjp)


def compute_soft_region_stats(probs, onehot) -> SoftRegionStats:
    """Soft intersection ``g_t``, union ``f_t`` and weights ``1/f_t``, ``g_t/f_t^2``.

    Classes with zero union get zero weights.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    gt = np.asarray(onehot, dtype=np.float64)
    _check_probs(p, gt)
    inter = (p * gt).sum(axis=0)
    union = (p + gt - p * gt).sum(axis=0)
    if not np.any(union > 0):
        raise ValueError("every class has zero union (empty batch?)")
    live = union > 0
    safe = np.where(live, union, 1.0)
    w_pos = np.where(live, 1.0 / safe, 0.0)
    w_neg = np.where(live, inter / (safe * safe), 0.0)
    return SoftRegionStats(inter, union, w_pos, w_neg)


def lp_ln_hinge(pr, gt, t: int, g: float) -> tuple[float, float]:
    """Categorical-hinge style positive/negative sample losses for one row."""
    pr = np.asarray(pr, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    s_gt = float(pr @ gt)
    lp = max(float(np.max(pr * (1.0 - gt))) - s_gt + g, 0.0)
    ln = max(float(pr[t]) - s_gt + g, 0.0)
    return lp, ln


def lp_ln_linear(pr, gt, t: int, g: float) -> tuple[float, float]:
    """Linear positive loss ``-score_gt``; negative loss ``score_t`` unless beaten by margin."""
    pr = np.asarray(pr, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    s_gt = float(pr @ gt)
    lp = -s_gt
    ln = 0.0 if s_gt > float(pr[t]) + g else float(pr[t])
    return lp, ln


def _sample_terms(s: np.ndarray, labels: np.ndarray, variant: str, g: float):
    """Vectorized L_p per row, L_n per (row, class), and their subgradients."""
    k, c = s.shape
    rows = np.arange(k)
    s_gt = s[rows, labels]
    d_lp = np.zeros((k, c))
    d_ln_t = np.zeros((k, c))   # d L_n(i,t) / d s_it
    d_ln_gt = np.zeros((k, c))  # d L_n(i,t) / d s_i,gt
    if variant == "hinge":
        masked = s.copy()
        masked[rows, labels] = 0.0  # the GT entry is zeroed, not removed
        j = masked.argmax(axis=1)
        lp_raw = masked[rows, j] - s_gt + g
        lp = np.maximum(lp_raw, 0.0)
        act = lp_raw > 0
        # when j is the GT column its entry is 0*s, contributing no gradient
        other = act & (j != labels)
        d_lp[rows[other], j[other]] += 1.0
        d_lp[rows[act], labels[act]] -= 1.0
        ln_raw = s - s_gt[:, None] + g
        ln = np.maximum(ln_raw, 0.0)
        on = ln_raw > 0
        d_ln_t[on] = 1.0
        d_ln_gt[on] = -1.0
    else:
        lp = -s_gt
        d_lp[rows, labels] = -1.0
        beaten = s_gt[:, None] > s + g
        ln = np.where(beaten, 0.0, s)
        d_ln_t[~beaten] = 1.0
    return lp, ln, d_lp, d_ln_t, d_ln_gt


def seg_loss(scores: Tensor, labels, stats: SoftRegionStats, cfg: LossConfig) -> Tensor:
    """Class-weighted positive/negative sample loss, normalised by ``K * sum_t(W_p + W_n)``."""
    k, c = scores.shape
    labels = _check_labels(labels, k, c)
    if stats.w_pos.shape != (c,) or stats.w_neg.shape != (c,):
        raise ShapeError(f"stats cover {stats.w_pos.shape[0]} classes but scores have {c}")
    wp = stats.w_pos.astype(np.float64).copy()
    wn = stats.w_neg.astype(np.float64).copy()
    if not cfg.include_background:
        wp[0] = wn[0] = 0.0
    norm = k * float((wp + wn).sum())
    if norm <= 0:
        raise ValueError("all class weights are zero")
    s = scores.data
    lp, ln, d_lp, d_ln_t, d_ln_gt = _sample_terms(s, labels, cfg.variant, cfg.margin_g)
    rows = np.arange(k)
    neg = np.ones((k, c))
    neg[rows, labels] = 0.0
    wn_neg = neg * wn[None, :]
    total = float((wp[labels] * lp).sum() + (wn_neg * ln).sum())

    def vjp(g):
        grad = wp[labels][:, None] * d_lp + wn_neg * d_ln_t
        grad[rows, labels] += (wn_neg * d_ln_gt).sum(axis=1)
        return (grad * (g / norm),)

    return record("seg_loss", np.asarray(total / norm), (scores,), vjp)
