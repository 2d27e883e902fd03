"""Deterministic synthetic face-video dataset and its on-disk manifest."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .masks import landmarks_to_mask

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class Clip:
    clip_id: str
    subject: str
    split: str
    frames: np.ndarray  # uint8 [L, H, W, 3]
    masks: np.ndarray  # uint8 [L, H, W]
    landmarks: np.ndarray | None = None  # [L, 68, 2]
    occluded: np.ndarray | None = None  # bool [L]
    fps: int = 30

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]


@dataclass
class SynthConfig:
    seed: int = 0
    clips: int = 80
    frames_per_clip: int = 30
    size: tuple[int, int] = (64, 64)
    clips_per_subject: int = 4
    split_ratio: tuple[int, int, int] = (60, 8, 12)
    window: int = 5
    occluder_prob: float = 0.8
    noise_sigma: float = 0.04
    fps: int = 30

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("size", "split_ratio"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Subject:
    subject_id: str
    face_w: float
    face_h: float
    eye_w: float
    eye_h: float
    eye_dx: float
    mouth_w: float
    mouth_h: float
    skin: np.ndarray
    background: np.ndarray
    lips: np.ndarray
    texture_seed: int

    @classmethod
    def sample(cls, subject_id: str, rng: np.random.Generator) -> Subject:
        skin = rng.uniform([0.45, 0.30, 0.20], [0.95, 0.75, 0.60])
        bg = rng.uniform(0.05, 0.95, size=3)
        lips = np.clip(skin * rng.uniform(0.55, 0.8) + np.array([0.15, -0.05, -0.05]), 0, 1)
        return cls(subject_id,
                   face_w=rng.uniform(0.34, 0.38), face_h=rng.uniform(0.40, 0.44),
                   eye_w=rng.uniform(0.085, 0.105), eye_h=rng.uniform(0.040, 0.055),
                   eye_dx=rng.uniform(0.42, 0.50),
                   mouth_w=rng.uniform(0.17, 0.22), mouth_h=rng.uniform(0.06, 0.08),
                   skin=skin, background=bg, lips=lips,
                   texture_seed=int(rng.integers(2**31)))


def face_landmarks(s: Subject, mouth_open: float, eye_open: float = 1.0) -> np.ndarray:
    """68 landmarks in face units (origin at the face box centre, y pointing down)."""
    lm = np.zeros((68, 2))
    a, b = s.face_w, s.face_h
    oy = -0.2 * b  # shifts the brow-to-chin extent so it is centred on the origin
    phi = np.linspace(0.0, np.pi, 17)
    lm[0:17] = np.stack([-a * np.cos(phi), oy + 0.05 * b + 0.95 * b * np.sin(phi)], axis=1)
    bx = np.linspace(-0.88 * a, -0.12 * a, 5)
    arch = 0.08 * b * np.sin(np.linspace(0.3, np.pi - 0.3, 5))
    lm[17:22] = np.stack([bx, oy - 0.52 * b - arch], axis=1)
    lm[22:27] = np.stack([-bx[::-1], oy - 0.52 * b - arch[::-1]], axis=1)
    lm[27:31] = np.stack([np.zeros(4), oy + np.linspace(-0.3, 0.12, 4) * b], axis=1)
    lm[31:36] = np.stack([np.linspace(-0.1, 0.1, 5) * a, np.full(5, oy + 0.18 * b)], axis=1)
    ey = oy - 0.25 * b
    for base, sign in ((36, -1.0), (42, 1.0)):
        ex = sign * s.eye_dx * a
        w, h = s.eye_w, s.eye_h * eye_open
        xs = np.array([-w, -w / 3, w / 3, w, w / 3, -w / 3])
        ys = np.array([0.0, -h, -h, 0.0, h, h])
        lm[base:base + 6] = np.stack([ex + xs, ey + ys], axis=1)
    my = oy + 0.5 * b
    ang = np.pi + 2 * np.pi * np.arange(12) / 12
    lm[48:60] = np.stack([s.mouth_w * np.cos(ang), my + s.mouth_h * np.sin(ang)], axis=1)
    ang = np.pi + 2 * np.pi * np.arange(8) / 8
    iw, ih = 0.72 * s.mouth_w, 0.75 * s.mouth_h * mouth_open
    lm[60:68] = np.stack([iw * np.cos(ang), my + ih * np.sin(ang)], axis=1)
    return lm


def _texture(rng: np.random.Generator, h: int, w: int, scale: int = 8) -> np.ndarray:
    coarse = rng.normal(size=(h // scale + 2, w // scale + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    return ((1 - fy) * (1 - fx) * c[y0][:, x0] + (1 - fy) * fx * c[y0][:, x0 + 1]
            + fy * (1 - fx) * c[y0 + 1][:, x0] + fy * fx * c[y0 + 1][:, x0 + 1])


def render_frame(mask: np.ndarray, lm_px: np.ndarray, s: Subject, rng: np.random.Generator,
                 gain: float, bg_tex: np.ndarray, noise_sigma: float) -> np.ndarray:
    h, w = mask.shape
    img = np.empty((h, w, 3))
    img[:] = s.background
    img += 0.12 * bg_tex[..., None]
    face = mask > 0
    yy, xx = np.mgrid[0:h, 0:w]
    cx, cy = lm_px[30]
    shade = 1.0 - 0.25 * np.hypot((xx - cx) / w, (yy - cy) / h)
    img[face] = s.skin * shade[face][:, None]
    img[mask == 2] = np.array([0.92, 0.92, 0.90])
    for centre in (lm_px[36:42].mean(axis=0), lm_px[42:48].mean(axis=0)):
        r = 0.45 * np.linalg.norm(lm_px[37] - lm_px[41]) + 0.5
        iris = ((xx + 0.5 - centre[0]) ** 2 + (yy + 0.5 - centre[1]) ** 2 <= r * r) & (mask == 2)
        img[iris] = np.array([0.15, 0.10, 0.08])
    img[mask == 3] = s.lips
    img[mask == 4] = np.array([0.25, 0.05, 0.07])
    # eyebrows: dark strokes that stay in the skin class
    for i in list(range(17, 21)) + list(range(22, 26)):
        p, q = lm_px[i], lm_px[i + 1]
        for u in np.linspace(0, 1, 6):
            x, y = p + u * (q - p)
            stroke = (np.abs(xx + 0.5 - x) <= 1.0) & (np.abs(yy + 0.5 - y) <= 0.8)
            img[stroke & face] = s.skin * 0.35
    img *= gain
    img += rng.normal(scale=noise_sigma, size=img.shape)
    return np.clip(img * 255.0 + 0.5, 0, 255).astype(np.uint8)


def _occlude(img: np.ndarray, lm_px: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    top = lm_px[17:27, 1].min()
    bottom = lm_px[8, 1]
    fh = bottom - top
    band = rng.uniform(0.3, 0.45) * fh
    target = rng.choice([lm_px[36:48, 1].mean(), lm_px[48:68, 1].mean()])
    y0 = int(np.clip(target - band / 2 + rng.uniform(-0.1, 0.1) * fh, 0, h - 1))
    y1 = int(np.clip(y0 + band, y0 + 1, h))
    x0 = int(np.clip(lm_px[0:17, 0].min() - 0.1 * fh, 0, w - 1))
    x1 = int(np.clip(lm_px[0:17, 0].max() + 0.1 * fh, x0 + 1, w))
    colour = rng.uniform(0, 1, size=3)
    patch = colour + rng.normal(scale=0.08, size=(y1 - y0, x1 - x0, 3))
    out = img.copy()
    out[y0:y1, x0:x1] = np.clip(patch * 255.0, 0, 255).astype(np.uint8)
    return out


def occlusion_schedule(length: int, window: int, prob: float, rng: np.random.Generator,
                       ) -> np.ndarray:
    """Occluded frames: inside each window, a run starting after its first frame."""
    occ = np.zeros(length, dtype=bool)
    if window < 2:
        return occ
    for start in range(0, length - length % window, window):
        if rng.random() < prob:
            s = int(rng.integers(1, window))
            e = min(window, s + int(rng.integers(1, window)))
            occ[start + s:start + e] = True
    return occ


def generate_clip(subject: Subject, clip_id: str, split: str, cfg: SynthConfig,
                  rng: np.random.Generator) -> Clip:
    w, h = cfg.size
    S = min(w, h)
    L = cfg.frames_per_clip
    t = np.arange(L) / cfg.fps
    c0 = np.array([w / 2, h / 2]) + rng.uniform(-0.04, 0.04, size=2) * S
    amp = rng.uniform(0.02, 0.05, size=2) * S
    freq = rng.uniform(0.4, 1.2, size=2)
    ph = rng.uniform(0, 2 * np.pi, size=4)
    centres = c0 + amp * np.sin(2 * np.pi * freq * t[:, None] + ph[None, :2])
    rot = np.deg2rad(rng.uniform(5, 15)) * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + ph[2])
    scale = S * (1.0 + rng.uniform(0.0, 0.08) * np.sin(2 * np.pi * 0.5 * t + ph[3]))
    mouth = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(0.8, 2.0) * t + rng.uniform(0, 6.28))
    gain = 1.0 + rng.uniform(-0.12, 0.12) + 0.05 * np.sin(2 * np.pi * 0.7 * t)
    occ = occlusion_schedule(L, cfg.window, cfg.occluder_prob, rng)
    bg_tex = _texture(np.random.default_rng(subject.texture_seed), h, w)

    frames = np.empty((L, h, w, 3), dtype=np.uint8)
    masks = np.empty((L, h, w), dtype=np.uint8)
    lms = np.empty((L, 68, 2))
    for k in range(L):
        cs, sn = np.cos(rot[k]), np.sin(rot[k])
        R = np.array([[cs, -sn], [sn, cs]])
        lm = centres[k] + scale[k] * face_landmarks(subject, mouth[k]) @ R.T
        lms[k] = lm
        masks[k] = landmarks_to_mask(lm, w, h)
        frames[k] = render_frame(masks[k], lm, subject, rng, gain[k], bg_tex, cfg.noise_sigma)
        if occ[k]:
            frames[k] = _occlude(frames[k], lm, rng)
    return Clip(clip_id, subject.subject_id, split, frames, masks, lms, occ, cfg.fps)


def _subject_splits(n_subjects: int, ratio: tuple[int, int, int]) -> list[str]:
    total = sum(ratio)
    n_val = max(1, round(n_subjects * ratio[1] / total)) if ratio[1] else 0
    n_test = max(1, round(n_subjects * ratio[2] / total)) if ratio[2] else 0
    # tiny datasets: keep at least one training subject, shrinking val first
    while n_subjects - n_val - n_test < 1 and n_val:
        n_val -= 1
    while n_subjects - n_val - n_test < 1 and n_test:
        n_test -= 1
    n_train = n_subjects - n_val - n_test
    if n_train < 1:
        raise ValueError(f"{n_subjects} subjects cannot be split as {ratio}")
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def synth_video_generate(cfg: SynthConfig | None = None, **overrides) -> list[Clip]:
    """Generate subject-disjoint train/val/test clips, fully determined by ``cfg.seed``."""
    cfg = cfg or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    w, h = cfg.size
    if w < 32 or h < 32:
        raise ValueError("frame size must be at least 32x32")
    rng = np.random.default_rng(cfg.seed)
    n_subjects = -(-cfg.clips // cfg.clips_per_subject)
    splits = _subject_splits(n_subjects, cfg.split_ratio)
    subjects = [Subject.sample(f"s{i:03d}", rng) for i in range(n_subjects)]
    clips = []
    for i in range(cfg.clips):
        subj = subjects[i // cfg.clips_per_subject]
        split = splits[i // cfg.clips_per_subject]
        clip_rng = np.random.default_rng([cfg.seed, i])
        clips.append(generate_clip(subj, f"c{i:04d}", split, cfg, clip_rng))
    return clips


def split_clips(clips: list[Clip], split: str) -> list[Clip]:
    return [c for c in clips if c.split == split]


def dataset_digest(clips: list[Clip]) -> str:
    h = hashlib.sha256()
    for c in clips:
        h.update(c.clip_id.encode())
        h.update(c.subject.encode())
        h.update(c.split.encode())
        h.update(c.frames.tobytes())
        h.update(c.masks.tobytes())
    return h.hexdigest()


# --- on-disk layout ------------------------------------------------------------

@dataclass
class ClipEntry:
    clip_id: str
    subject: str
    split: str
    frames: list[str]
    masks: list[str]
    fps: int
    resolution: tuple[int, int]
    landmarks: list[str] = field(default_factory=list)


@dataclass
class SequenceManifest:
    clips: list[ClipEntry]
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps({"schema_version": self.schema_version,
                           "clips": [dict(c.__dict__, resolution=list(c.resolution))
                                     for c in self.clips]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> SequenceManifest:
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema {d.get('schema_version')}")
        clips = [ClipEntry(**{**c, "resolution": tuple(c["resolution"])}) for c in d["clips"]]
        return cls(clips)


def write_dataset(clips: list[Clip], root: str | Path) -> Path:
    """Write PNG frames/masks, pts landmarks and ``manifest.json`` under ``root``."""
    from .masks import write_pts

    root = Path(root)
    entries = []
    for c in clips:
        d = root / c.clip_id
        d.mkdir(parents=True, exist_ok=True)
        fr, mk, lp = [], [], []
        for k in range(c.length):
            f = d / f"frame_{k:03d}.png"
            m = d / f"mask_{k:03d}.png"
            Image.fromarray(c.frames[k], mode="RGB").save(f)
            Image.fromarray(c.masks[k], mode="L").save(m)
            fr.append(str(f.relative_to(root)))
            mk.append(str(m.relative_to(root)))
            if c.landmarks is not None:
                p = d / f"lm_{k:03d}.pts"
                write_pts(p, c.landmarks[k])
                lp.append(str(p.relative_to(root)))
        entries.append(ClipEntry(c.clip_id, c.subject, c.split, fr, mk, c.fps, c.resolution, lp))
    path = root / "manifest.json"
    path.write_text(SequenceManifest(entries).to_json())
    return path


def load_dataset(manifest_path: str | Path) -> list[Clip]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    m = SequenceManifest.from_json(manifest_path.read_text())
    clips = []
    for e in m.clips:
        frames = np.stack([np.asarray(Image.open(root / f).convert("RGB")) for f in e.frames])
        masks = np.stack([np.asarray(Image.open(root / f)) for f in e.masks])
        clips.append(Clip(e.clip_id, e.subject, e.split, frames, masks, fps=e.fps))
    return clips
