"""Gaussian temporal smoothing of per-frame class probabilities."""
from __future__ import annotations

import numpy as np


def gaussian_window(window: int = 5, sigma: float = 0.6) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    d = np.arange(window) - window // 2
    w = np.exp(-(d ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def temporal_smooth(probs_seq: np.ndarray, window: int = 5, sigma: float = 0.6) -> np.ndarray:
    """Weighted average over a centred window along axis 0.

    Frames outside the sequence are dropped and the remaining weights
    renormalised.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    probs_seq = np.asarray(probs_seq, dtype=np.float64)
    T = probs_seq.shape[0]
    half = window // 2
    raw = np.exp(-(np.arange(-half, half + 1) ** 2) / (2 * sigma ** 2))
    out = np.empty_like(probs_seq)
    for t in range(T):
        lo, hi = max(0, t - half), min(T, t + half + 1)
        w = raw[lo - t + half:hi - t + half]
        w = w / w.sum()
        out[t] = np.tensordot(w, probs_seq[lo:hi], axes=(0, 0))
    return out


def smoothing_weights(t: int, T: int, window: int = 5, sigma: float = 0.6) -> np.ndarray:
    """Effective weights over frames ``0..T-1`` used for output frame ``t``."""
    eye = np.eye(T)
    return temporal_smooth(eye, window, sigma)[t]
