"""Window batching of clips and conversion to model input tensors."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .resize import resize_bilinear, resize_nearest
from .synth import Clip

log = logging.getLogger(__name__)


def to_input(frames: np.ndarray) -> np.ndarray:
    """uint8 ``[N,H,W,3]`` -> float ``[N,3,H,W]`` scaled to [-1, 1]."""
    return np.asarray(frames, dtype=np.float64).transpose(0, 3, 1, 2) / 127.5 - 1.0


@dataclass
class Batch:
    images: np.ndarray  # float [N*T, 3, H, W]
    labels: np.ndarray  # int [N*T, H, W]
    windows: list[tuple[str, int]]  # (clip id, first frame) per T-block


def windows_of(clips: list[Clip], T: int) -> list[tuple[int, int]]:
    """``(clip index, start frame)`` of every whole T-frame window."""
    out = []
    for ci, c in enumerate(clips):
        if c.length % T:
            log.warning("clip %s: %d trailing frame(s) dropped (T=%d)", c.clip_id, c.length % T, T)
        out.extend((ci, s) for s in range(0, c.length - c.length % T, T))
    return out


def prepare_clip(c: Clip, size: tuple[int, int] | None) -> tuple[np.ndarray, np.ndarray]:
    """Model-ready float frames and label maps, resized to ``size=(w, h)`` if given."""
    frames = c.frames
    masks = c.masks
    if size is not None and (frames.shape[2], frames.shape[1]) != tuple(size):
        w, h = size
        frames = resize_bilinear(frames, h, w)
        masks = resize_nearest(masks, h, w)
    return to_input(frames), masks.astype(np.int64)


def batch_sequences(clips: list[Clip], T: int, N: int, seed: int | None = 0,
                    size: tuple[int, int] | None = None, drop_last: bool = False,
                    cache: dict | None = None) -> Iterator[Batch]:
    """Yield batches of ``N`` whole T-frame windows; shuffling permutes windows only."""
    if T < 1 or N < 1:
        raise ValueError("T and N must be positive")
    wins = windows_of(clips, T)
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(wins))
        wins = [wins[i] for i in order]
    cache = {} if cache is None else cache
    for b in range(0, len(wins), N):
        chunk = wins[b:b + N]
        if drop_last and len(chunk) < N:
            break
        imgs, labs = [], []
        for ci, s in chunk:
            if ci not in cache:
                cache[ci] = prepare_clip(clips[ci], size)
            x, y = cache[ci]
            imgs.append(x[s:s + T])
            labs.append(y[s:s + T])
        yield Batch(np.concatenate(imgs), np.concatenate(labs),
                    [(clips[ci].clip_id, s) for ci, s in chunk])


def count_batches(clips: list[Clip], T: int, N: int, drop_last: bool = False) -> int:
    n = sum(c.length // T for c in clips)
    return n // N if drop_last else -(-n // N)
