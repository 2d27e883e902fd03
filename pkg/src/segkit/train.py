"""Two-step training protocol and evaluation loops."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as ts
from .data.resize import resize_bilinear, resize_nearest
from .data.sequences import batch_sequences, prepare_clip, to_input
from .data.smoothing import temporal_smooth
from .data.synth import Clip
from .losses import (LossConfig, compute_soft_region_stats, cross_entropy, iou_loss_multiclass,
                     one_hot, seg_loss)
from .metrics import ConfusionMatrix, mean_iou
from .models import ModelGraph
from .optim import OptimizerConfig, make_optimizer
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


def compute_loss(logits: Tensor, labels: np.ndarray, cfg: LossConfig) -> Tensor:
    """Loss over every pixel of every frame in the batch."""
    rows = ts.to_rows(logits)
    lab = np.asarray(labels).reshape(-1)
    c = rows.shape[1]
    if cfg.kind == "cross_entropy":
        return cross_entropy(rows, lab)
    oh = one_hot(lab, c)
    if cfg.kind == "iou":
        classes = None if cfg.include_background else np.arange(1, c)
        return iou_loss_multiclass(ts.softmax(rows, axis=1), oh, classes)
    z = rows.data - rows.data.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    stats = compute_soft_region_stats(probs, oh)
    return seg_loss(rows, lab, stats, cfg)


# --- frozen-prefix feature cache ---------------------------------------------

def first_trainable_layer(model: ModelGraph, frozen_groups) -> int:
    """End of the frozen prefix: one past the last frozen parameterised layer
    that precedes the first trainable one (parameter-free layers stay live)."""
    groups = model.param_groups()
    stop = 0
    for i, layer in enumerate(model.layers):
        names = [n for n in model.params if n.split("/")[0] == layer.name]
        if any(groups[n] not in frozen_groups for n in names):
            return stop
        if names:
            stop = i + 1
    return stop


class FeatureCache:
    """Outputs of the frozen leading layers, computed once per clip."""

    def __init__(self, model: ModelGraph, stop: int, size: tuple[int, int] | None = None,
                 chunk: int = 30):
        self.model = model
        self.stop = stop
        self.size = size
        self.chunk = chunk
        self._feats: dict[str, np.ndarray] = {}
        self._labels: dict[str, np.ndarray] = {}

    def get(self, clip: Clip) -> tuple[np.ndarray, np.ndarray]:
        if clip.clip_id not in self._feats:
            x, y = prepare_clip(clip, self.size)
            parts = [self.model.run_layers(Tensor(x[i:i + self.chunk]), 0, self.stop).data
                     for i in range(0, len(x), self.chunk)]
            self._feats[clip.clip_id] = np.concatenate(parts)
            self._labels[clip.clip_id] = y
        return self._feats[clip.clip_id], self._labels[clip.clip_id]


def model_size(model: ModelGraph) -> tuple[int, int]:
    h, w = model.input_size
    return w, h


def clip_logits(model: ModelGraph, clip: Clip, cache: FeatureCache | None = None,
                windows_per_pass: int = 2) -> np.ndarray:
    """Logits ``[L', C, H, W]`` for every whole-window frame of the clip."""
    T = model.clip_length
    if cache is not None:
        x, _ = cache.get(clip)
        start = cache.stop
    else:
        x, _ = prepare_clip(clip, model_size(model))
        start = 0
    usable = (len(x) // T) * T
    step = T * windows_per_pass
    outs = [model.run_layers(Tensor(x[i:min(i + step, usable)]), start).data
            for i in range(0, usable, step)]
    return np.concatenate(outs)


@dataclass
class EvalResult:
    cm: ConfusionMatrix
    position_cms: list[ConfusionMatrix]
    clip_cms: dict[str, ConfusionMatrix]
    frame_miou: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def miou(self) -> float:
        return mean_iou(self.cm)[0]

    @property
    def per_class(self) -> np.ndarray:
        return mean_iou(self.cm)[1]

    def position_miou(self) -> np.ndarray:
        return np.array([mean_iou(c)[0] for c in self.position_cms])

    def group_miou(self, groups: list[list[str]]) -> np.ndarray:
        out = []
        for g in groups:
            cm = ConfusionMatrix(self.cm.num_classes)
            for cid in g:
                cm = cm.merge(self.clip_cms[cid])
            out.append(mean_iou(cm)[0])
        return np.array(out)


def predict_clip(model: ModelGraph, clip: Clip, cache: FeatureCache | None = None,
                 smooth: bool = False, window: int = 5, sigma: float = 0.6) -> np.ndarray:
    """Class maps at the clip's original resolution for whole-window frames."""
    logits = clip_logits(model, clip, cache)
    if smooth:
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        pred = temporal_smooth(p, window, sigma).argmax(axis=1)
    else:
        pred = logits.argmax(axis=1)
    w, h = clip.resolution
    return resize_nearest(pred, h, w)


def predict_frames(model: ModelGraph, frames: np.ndarray, windows_per_pass: int = 2) -> np.ndarray:
    """Class maps for uint8/float ``[L,H,W,3]`` frames, returned at their own resolution.

    ``L`` must be a multiple of the model's clip length.
    """
    frames = np.asarray(frames)
    L, h, w = frames.shape[:3]
    T = model.clip_length
    if L % T:
        raise ValueError(f"{L} frames is not a multiple of the clip length {T}")
    mh, mw = model.input_size
    if (h, w) != (mh, mw):
        frames = resize_bilinear(frames, mh, mw)
    x = to_input(frames)
    step = T * windows_per_pass
    pred = np.concatenate([model.run_layers(Tensor(x[i:i + step])).data.argmax(axis=1)
                           for i in range(0, L, step)])
    return resize_nearest(pred, h, w)


def evaluate(model: ModelGraph, clips: list[Clip], cache: FeatureCache | None = None,
             smooth: bool = False, positions: int = 5, predictions: dict | None = None,
             ) -> EvalResult:
    """Confusion matrices at original resolution: total, per window position and per clip."""
    c = model.num_classes
    total = ConfusionMatrix(c)
    pos = [ConfusionMatrix(c) for _ in range(positions)]
    per_clip: dict[str, ConfusionMatrix] = {}
    frame_scores: dict[str, np.ndarray] = {}
    for clip in clips:
        pred = predictions[clip.clip_id] if predictions is not None else predict_clip(
            model, clip, cache, smooth)
        gt = clip.masks[:len(pred)]
        cm = ConfusionMatrix(c)
        scores = np.empty(len(pred))
        for k in range(len(pred)):
            fcm = ConfusionMatrix(c).accumulate(gt[k], pred[k])
            cm.counts += fcm.counts
            pos[k % positions].counts += fcm.counts
            try:
                scores[k] = mean_iou(fcm)[0]
            except ValueError:
                scores[k] = math.nan
        per_clip[clip.clip_id] = cm
        frame_scores[clip.clip_id] = scores
        total.counts += cm.counts
    return EvalResult(total, pos, per_clip, frame_scores)


def classifier_logit_scale(model: ModelGraph, clips: list[Clip], frames: int = 40,
                           q: float = 99.0) -> float:
    """Percentile of |logit| over a few frames, used to rescale a seeded ConvLSTM."""
    xs, n = [], 0
    for c in clips:
        x, _ = prepare_clip(c, model_size(model))
        xs.append(x[:frames - n])
        n += len(xs[-1])
        if n >= frames:
            break
    z = model.run_layers(Tensor(np.concatenate(xs)), 0, model.index("conv6") + 1).data
    return max(1.0, float(np.percentile(np.abs(z), q)))


# --- fitting -----------------------------------------------------------------

@dataclass
class FitConfig:
    epochs: int = 10
    T: int = 5
    N: int = 2
    seed: int = 0
    validate: bool = True
    max_steps: int | None = None


def fit(model: ModelGraph, train: list[Clip], val: list[Clip], loss_cfg: LossConfig,
        optim_cfg: OptimizerConfig, fit_cfg: FitConfig, phase: str = "train",
        history: list[dict] | None = None, dump_dir: Path | None = None) -> ModelGraph:
    """Train in place; the parameters with the best validation mIoU are restored at the end."""
    history = history if history is not None else []
    groups = model.param_groups()
    frozen = optim_cfg.frozen_groups
    stop = first_trainable_layer(model, frozen)
    cache = FeatureCache(model, stop, model_size(model)) if stop > 0 else None
    trainable = {n: p for n, p in model.params.items() if groups[n] not in frozen}
    for n, p in model.params.items():
        p.requires_grad = n in trainable
    per_epoch = -(-sum(c.length // fit_cfg.T for c in train) // fit_cfg.N)
    total = per_epoch * fit_cfg.epochs
    if fit_cfg.max_steps is not None:
        total = min(total, fit_cfg.max_steps)
    if optim_cfg.total_steps <= 0:
        optim_cfg = OptimizerConfig(**{**optim_cfg.__dict__, "total_steps": total})
    opt = make_optimizer(trainable, {n: groups[n] for n in trainable}, optim_cfg)
    clip_index = {c.clip_id: c for c in train}
    best = (-math.inf, None)
    step = 0
    for epoch in range(1, fit_cfg.epochs + 1):
        losses = []
        batches = batch_sequences(train, fit_cfg.T, fit_cfg.N, seed=fit_cfg.seed * 7919 + epoch,
                                  size=model_size(model), cache={})
        for batch in batches:
            if step >= total:
                break
            if cache is not None:
                feats = [cache.get(clip_index[cid])[0][s:s + fit_cfg.T] for cid, s in batch.windows]
                x, start = np.concatenate(feats), stop
            else:
                x, start = batch.images, 0
            opt.zero_grad()
            with ts.Tape():
                logits = model.run_layers(Tensor(x), start)
                loss = compute_loss(logits, batch.labels, loss_cfg)
                if not math.isfinite(loss.item()):
                    raise _diverged(phase, epoch, step, batch, dump_dir)
                ts.backward(loss)
            opt.step()
            step += 1
            losses.append(loss.item())
        val_miou = math.nan
        if fit_cfg.validate and val:
            val_miou = evaluate(model, val, cache).miou
        history.append({"phase": phase, "epoch": epoch, "steps": step,
                        "train_loss": float(np.mean(losses)) if losses else math.nan,
                        "val_miou": val_miou})
        log.info("%s epoch %d: loss %.5f val mIoU %.4f", phase, epoch,
                 history[-1]["train_loss"], val_miou)
        score = val_miou if fit_cfg.validate and val else epoch
        if score > best[0]:
            best = (score, {n: p.data.copy() for n, p in trainable.items()})
        if step >= total:
            break
    if best[1] is not None:
        for n, arr in best[1].items():
            model.params[n].data[...] = arr
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    return model


def _diverged(phase, epoch, step, batch, dump_dir) -> TrainingDiverged:
    path = None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / f"nan_batch_{phase}_{step}.npz"
        np.savez(path, images=batch.images, labels=batch.labels,
                 windows=np.array([f"{c}:{s}" for c, s in batch.windows]))
    return TrainingDiverged(f"non-finite loss in {phase} epoch {epoch} step {step}", path)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["phase", "epoch", "steps", "train_loss", "val_miou"],
                       lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o))
