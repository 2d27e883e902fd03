"""Primary model -> eye/mouth crops -> zoomed-in sub-models -> merged face mask."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data.crops import CropBox, crop_frames, crop_masks, localize_crop_boxes, paste_size
from .data.masks import EYES, INNER_MOUTH, OUTER_MOUTH, SKIN
from .data.synth import Clip
from .models import ModelGraph
from .train import predict_frames

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionSpec:
    """How one zoomed-in sub-model sees and reports its region."""
    kind: str
    size: tuple[int, int]  # sub-model input (w, h)
    mapping: tuple[int, ...]  # sub-model class -> face class; index 0 is background
    margin: float = 0.5
    train_noise: float = 0.1

    def __post_init__(self):
        fg = [c for c in self.mapping[1:]]
        if self.mapping[0] != 0 or len(set(fg)) != len(fg) or 0 in fg:
            raise ValueError(f"{self.kind}: mapping must send 0 to background and be "
                             "injective on foreground classes")

    @property
    def owned(self) -> tuple[int, ...]:
        return tuple(self.mapping[1:])

    @property
    def aspect(self) -> float:
        return self.size[0] / self.size[1]

    def box(self, masks: np.ndarray, noise: float = 0.0, rng=None) -> CropBox:
        return localize_crop_boxes(masks, self.kind, noise, rng, self.margin, self.aspect)

    def to_region_labels(self, masks: np.ndarray) -> np.ndarray:
        out = np.zeros(masks.shape, dtype=np.int64)
        for k, c in enumerate(self.mapping[1:], start=1):
            out[masks == c] = k
        return out


EYE_REGION = RegionSpec("eyes", (96, 48), (0, EYES))
MOUTH_REGION = RegionSpec("mouth", (48, 48), (0, OUTER_MOUTH, INNER_MOUTH))


@dataclass
class CascadeBundle:
    primary: ModelGraph
    eye_model: ModelGraph | None = None
    mouth_model: ModelGraph | None = None
    eyes: RegionSpec = EYE_REGION
    mouth: RegionSpec = MOUTH_REGION
    window: int = 5
    notices: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.primary.num_classes != 5:
            raise ValueError("the primary model must output the 5 face classes")
        for spec, model in self.stages():
            if model is not None and model.num_classes != len(spec.mapping):
                raise ValueError(f"{spec.kind} model has {model.num_classes} classes, "
                                 f"expected {len(spec.mapping)}")

    def stages(self) -> list[tuple[RegionSpec, ModelGraph | None]]:
        # fixed order: eyes first, mouth second (mouth wins where boxes overlap)
        return [(self.eyes, self.eye_model), (self.mouth, self.mouth_model)]


def integrate_masks(primary: np.ndarray, region_pred: np.ndarray, box: CropBox,
                    mapping: tuple[int, ...], fill: int = SKIN) -> np.ndarray:
    """Replace the region's classes inside ``box`` by the sub-model's decision.

    Works on one mask ``[H,W]`` or a stack ``[T,H,W]``; ``region_pred`` holds
    sub-model class indices at the box's pixel size. Pixels the sub-model calls
    background keep the primary label unless that label belongs to the region,
    in which case they become ``fill``.
    """
    out = np.array(primary, copy=True)
    height, width = out.shape[-2:]
    if region_pred.shape[-2:] != (box.h, box.w):
        raise ValueError(f"region prediction {region_pred.shape[-2:]} does not match box "
                         f"{box.h}x{box.w}")
    # keep only the part of the box inside the frame
    x0, y0 = max(box.x, 0), max(box.y, 0)
    x1, y1 = min(box.x + box.w, width), min(box.y + box.h, height)
    if x1 <= x0 or y1 <= y0:
        log.warning("crop box %s lies outside the frame; nothing integrated", box)
        return out
    clamped = CropBox(x0, y0, x1 - x0, y1 - y0, box.kind, box.fallback)
    if clamped != box:
        log.warning("crop box %s clamped to the frame", box)
        region_pred = region_pred[..., y0 - box.y:y1 - box.y, x0 - box.x:x1 - box.x]
    lut = np.asarray(mapping)
    ys, xs = clamped.slices()
    inside = out[..., ys, xs]
    owned = np.isin(inside, lut[1:])
    fg = region_pred > 0
    inside[owned & ~fg] = fill
    inside[fg] = lut[region_pred[fg]]
    out[..., ys, xs] = inside
    return out


def run_cascade(bundle: CascadeBundle, frames: np.ndarray) -> np.ndarray:
    """Face masks ``[L,H,W]`` for ``[L,H,W,3]`` frames (``L`` a multiple of the window)."""
    frames = np.asarray(frames)
    L, h, w = frames.shape[:3]
    T = bundle.window
    if L % T:
        raise ValueError(f"{L} frames is not a multiple of the window {T}")
    out = predict_frames(bundle.primary, frames)
    for spec, model in bundle.stages():
        if model is None:
            msg = f"no {spec.kind} model: keeping the primary {spec.kind} labels"
            if msg not in bundle.notices:
                bundle.notices.append(msg)
                log.warning(msg)
            continue
        for s in range(0, L, T):
            win = slice(s, s + T)
            box = spec.box(out[win])
            crops = crop_frames(frames[win], box, *spec.size)
            pred = predict_frames(model, _per_model_length(crops, model))[:T]
            out[win] = integrate_masks(out[win], paste_size(pred, box), box, spec.mapping)
    return out


def _per_model_length(crops: np.ndarray, model: ModelGraph) -> np.ndarray:
    """Pad a window by repeating its last frame up to the model's clip length."""
    T = model.clip_length
    extra = -len(crops) % T
    if extra:
        crops = np.concatenate([crops, np.repeat(crops[-1:], extra, axis=0)])
    return crops


def cascade_predictions(bundle: CascadeBundle, clips: list[Clip]) -> dict[str, np.ndarray]:
    """Integrated masks for the whole-window frames of each clip."""
    out = {}
    for c in clips:
        usable = c.length - c.length % bundle.window
        out[c.clip_id] = run_cascade(bundle, c.frames[:usable])
    return out


def region_clips(clips: list[Clip], spec: RegionSpec, window: int = 5, seed: int = 0,
                 noise: float | None = None) -> list[Clip]:
    """Training crops for a sub-model: one ground-truth box per window, jittered."""
    noise = spec.train_noise if noise is None else noise
    rng = np.random.default_rng(seed)
    out = []
    for c in clips:
        fr, ms = [], []
        for s in range(0, c.length - c.length % window, window):
            win = slice(s, s + window)
            box = spec.box(c.masks[win], noise, rng)
            fr.append(np.clip(crop_frames(c.frames[win], box, *spec.size) + 0.5, 0, 255)
                      .astype(np.uint8))
            ms.append(spec.to_region_labels(crop_masks(c.masks[win], box, *spec.size))
                      .astype(np.uint8))
        if fr:
            out.append(Clip(f"{c.clip_id}-{spec.kind}", c.subject, c.split,
                            np.concatenate(fr), np.concatenate(ms), fps=c.fps))
    return out
