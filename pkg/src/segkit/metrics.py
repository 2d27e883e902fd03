"""Confusion-matrix IoU accounting, temporal profiles, per-subject reports and tests."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats as sps

log = logging.getLogger(__name__)

CLASS_NAMES = ("BG", "FS", "Eyes", "OMT", "IMT")


class ConfusionMatrix:
    """``counts[i, j]`` = pixels annotated ``i`` and predicted ``j``."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = num_classes
        self.counts = (np.zeros((num_classes, num_classes), dtype=np.int64)
                       if counts is None else np.asarray(counts, dtype=np.int64).copy())

    def accumulate(self, gt, pred) -> ConfusionMatrix:
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"resolution mismatch: gt {gt.shape} vs pred {pred.shape}")
        c = self.num_classes
        if gt.size and (gt.max() >= c or pred.max() >= c or gt.min() < 0 or pred.min() < 0):
            raise ValueError(f"class indices must lie in [0, {c})")
        flat = gt.astype(np.int64).ravel() * c + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from both gt and pred."""
        n = self.counts.astype(np.float64)
        tp = np.diag(n)
        union = n.sum(axis=1) + n.sum(axis=0) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def accumulate(cm: ConfusionMatrix, gt, pred) -> ConfusionMatrix:
    return cm.accumulate(gt, pred)


def mean_iou(cm: ConfusionMatrix, exclude_background: bool = True) -> tuple[float, np.ndarray]:
    per_class = cm.per_class_iou()
    included = per_class[1:] if exclude_background else per_class
    defined = included[~np.isnan(included)]
    if defined.size == 0:
        raise ValueError("no included class has a nonzero union")
    return float(defined.mean()), per_class


def frame_miou(gt, pred, num_classes: int, exclude_background: bool = True) -> float:
    cm = ConfusionMatrix(num_classes).accumulate(gt, pred)
    try:
        return mean_iou(cm, exclude_background)[0]
    except ValueError:
        return 1.0 if np.array_equal(gt, pred) else 0.0


def temporal_improvement_profile(model, baseline) -> np.ndarray:
    """Mean per-frame-position difference ``model - baseline`` over clips.

    Inputs are ``[clips, T]`` (or a single ``[T]`` row).
    """
    a = np.atleast_2d(np.asarray(model, dtype=np.float64))
    b = np.atleast_2d(np.asarray(baseline, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return (a - b).mean(axis=0)


def grouped_significance(a, b, alpha: float = 0.05, alternative: str = "two-sided",
                         ) -> tuple[float, bool]:
    """Paired t-test on group scores. ``alternative='greater'`` tests mean(a - b) > 0."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need at least two paired groups")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"unknown alternative {alternative!r}")
    m = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if m == 0:
            p = 1.0
        elif alternative == "two-sided" or (alternative == "greater") == (m > 0):
            p = 0.0
        else:
            p = 1.0
        return p, p < alpha
    t = m / (sd / math.sqrt(d.size))
    df = d.size - 1
    if alternative == "two-sided":
        p = float(2.0 * sps.t.sf(abs(t), df))
    elif alternative == "greater":
        p = float(sps.t.sf(t, df))
    else:
        p = float(sps.t.cdf(t, df))
    return p, p < alpha


def split_groups(clip_ids: Sequence[str], groups: int = 10, seed: int = 0) -> list[list[str]]:
    """Stable sort of clip ids, seeded shuffle, then near-equal contiguous chunks."""
    ids = sorted(clip_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [list(chunk) for chunk in np.array_split(np.array(shuffled, dtype=object), groups)]


@dataclass
class SubjectStats:
    subject: str
    mean: float
    std: float
    frames: int


def per_subject_report(results: Iterable[tuple[str, float]]) -> list[SubjectStats]:
    """Mean and population std of frame mIoU per subject, in first-seen order."""
    buckets: dict[str, list[float]] = {}
    for subject, value in results:
        buckets.setdefault(subject, [])
        if value is None or (isinstance(value, float) and math.isnan(value)):
            continue
        buckets[subject].append(float(value))
    out = []
    for subject, vals in buckets.items():
        if not vals:
            log.warning("subject %s has no frames; skipped", subject)
            continue
        arr = np.asarray(vals)
        out.append(SubjectStats(subject, float(arr.mean()), float(arr.std()), arr.size))
    return out


def iou_table_csv(rows: Sequence[tuple[str, float, np.ndarray]],
                  class_names: Sequence[str] = CLASS_NAMES) -> str:
    """CSV with the per-class IoU layout: method, mIoU, foreground classes..., BG (percent)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "mIoU", *class_names[1:], class_names[0]])
    for name, miou, per_class in rows:
        pc = [f"{100 * v:.2f}" if not np.isnan(v) else "nan" for v in per_class]
        w.writerow([name, f"{100 * miou:.2f}", *pc[1:], pc[0]])
    return buf.getvalue()


def ascii_table(csv_text: str) -> str:
    rows = list(csv.reader(io.StringIO(csv_text)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
