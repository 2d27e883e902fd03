"""Image resampling helpers (half-pixel centre convention)."""
from __future__ import annotations

import numpy as np


def _linear_weights(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int, channels: bool = True,
                    ) -> np.ndarray:
    """Resize ``[..., H, W, C]`` (``channels=True``) or ``[..., H, W]`` float arrays."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-3:-1] if channels else img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ah, aw = _linear_weights(h, out_h), _linear_weights(w, out_w)
    if channels:
        return np.einsum("ih,...hwc,jw->...ijc", ah, img, aw, optimize=True)
    return np.einsum("ih,...hw,jw->...ij", ah, img, aw, optimize=True)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_nearest(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of ``[..., H, W]`` class-index maps."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if (h, w) == (out_h, out_w):
        return labels.copy()
    return labels[..., nearest_indices(h, out_h)[:, None], nearest_indices(w, out_w)[None, :]]
