"""Eye/mouth crop boxes fixed per window, and crop/paste resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .masks import EYES, INNER_MOUTH, OUTER_MOUTH
from .resize import resize_bilinear, resize_nearest

REGION_CLASSES = {"eyes": (EYES,), "mouth": (OUTER_MOUTH, INNER_MOUTH)}
# fallback anchors relative to the face bounding box: (cx, cy, w, h)
FALLBACK = {"eyes": (0.5, 0.35, 0.8, 0.3), "mouth": (0.5, 0.78, 0.55, 0.3)}


@dataclass(frozen=True)
class CropBox:
    x: int
    y: int
    w: int
    h: int
    kind: str
    fallback: bool = False

    @property
    def centre(self) -> tuple[float, float]:
        return self.x + (self.w - 1) / 2, self.y + (self.h - 1) / 2

    def slices(self) -> tuple[slice, slice]:
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def clamp(self, width: int, height: int) -> CropBox:
        w = min(max(self.w, 1), width)
        h = min(max(self.h, 1), height)
        x = min(max(self.x, 0), width - w)
        y = min(max(self.y, 0), height - h)
        return CropBox(x, y, w, h, self.kind, self.fallback)


def _box_from_extent(cx: float, cy: float, w: float, h: float, kind: str, width: int,
                     height: int, fallback: bool) -> CropBox:
    bw = max(int(round(w)), 1)
    bh = max(int(round(h)), 1)
    x = int(math.floor(cx - (bw - 1) / 2 + 0.5))
    y = int(math.floor(cy - (bh - 1) / 2 + 0.5))
    return CropBox(x, y, bw, bh, kind, fallback).clamp(width, height)


def localize_crop_boxes(masks, kind: str, noise: float = 0.0, rng: np.random.Generator | None = None,
                        margin: float = 0.5, aspect: float | None = None, min_size: int = 5,
                        ) -> CropBox:
    """One box covering the region's union over all frames of the window.

    The tight box grows by ``margin`` of its size, is widened to ``aspect``
    (w/h) if given, and its centre is jittered by up to ``noise`` of the box size.
    """
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = masks[None]
    if kind not in REGION_CLASSES:
        raise ValueError(f"unknown region kind {kind!r}")
    _, height, width = masks.shape
    region = np.isin(masks, REGION_CLASSES[kind]).any(axis=0)
    fallback = not region.any()
    if fallback:
        face = (masks > 0).any(axis=0)
        if face.any():
            ys, xs = np.nonzero(face)
            fx0, fx1, fy0, fy1 = xs.min(), xs.max(), ys.min(), ys.max()
        else:
            fx0, fy0, fx1, fy1 = 0, 0, width - 1, height - 1
        ax, ay, aw, ah = FALLBACK[kind]
        fw, fh = fx1 - fx0 + 1, fy1 - fy0 + 1
        cx, cy = fx0 + ax * fw - 0.5, fy0 + ay * fh - 0.5
        w, h = aw * fw, ah * fh
    else:
        ys, xs = np.nonzero(region)
        cx, cy = (xs.min() + xs.max()) / 2, (ys.min() + ys.max()) / 2
        w = (xs.max() - xs.min() + 1) * (1 + margin)
        h = (ys.max() - ys.min() + 1) * (1 + margin)
    w, h = max(w, min_size), max(h, min_size)
    if aspect is not None:
        if w / h < aspect:
            w = h * aspect
        else:
            h = w / aspect
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        cx += rng.uniform(-noise, noise) * w
        cy += rng.uniform(-noise, noise) * h
    return _box_from_extent(cx, cy, w, h, kind, width, height, fallback)


def crop_frames(frames: np.ndarray, box: CropBox, out_w: int, out_h: int) -> np.ndarray:
    """Crop uint8/float ``[T,H,W,3]`` frames to ``box`` and resize bilinearly."""
    ys, xs = box.slices()
    return resize_bilinear(np.asarray(frames)[:, ys, xs], out_h, out_w)


def crop_masks(masks: np.ndarray, box: CropBox, out_w: int, out_h: int) -> np.ndarray:
    ys, xs = box.slices()
    return resize_nearest(np.asarray(masks)[:, ys, xs], out_h, out_w)


def paste_size(pred: np.ndarray, box: CropBox) -> np.ndarray:
    """Resize a sub-model class map back to the box's pixel size."""
    return resize_nearest(pred, box.h, box.w)
