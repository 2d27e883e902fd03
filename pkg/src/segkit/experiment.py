"""Experiment configuration and the two-step (FCN, then ConvLSTM-FCN) pipeline."""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .cascade import EYE_REGION, MOUTH_REGION, CascadeBundle, RegionSpec, region_clips
from .data.synth import Clip, SynthConfig, dataset_digest, split_clips
from .losses import LossConfig
from .models import ModelConfig, ModelGraph, build_mini_fcn, convert_to_convlstm_fcn
from .optim import OptimizerConfig, freeze_all_but_convlstm
from .train import classifier_logit_scale, fit, FitConfig, history_csv, write_json

log = logging.getLogger(__name__)

SEED_ENV = "SSK_SEED"


def _strict(cls, d: dict | None, section: str):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in {section}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class OptimSection:
    kind: str = "adam"
    base_lr: float = 1e-4
    gamma: float = 1.0
    freeze: bool = True
    total_steps: int = 0

    def build(self, groups) -> OptimizerConfig:
        frozen = freeze_all_but_convlstm(groups) if self.freeze else frozenset()
        return OptimizerConfig(kind=self.kind, base_lr=self.base_lr, gamma=self.gamma,
                               total_steps=self.total_steps, frozen_groups=frozen)


@dataclass
class TrainSection:
    steps: str = "both"  # "fcn" stops after the baseline
    fcn_epochs: int = 20
    fcn_lr: float = 1e-3
    fcn_batch: int = 10
    epochs: int = 6
    T: int = 5
    N: int = 2
    peephole: bool = True
    seed_from_classifier: bool = True
    logit_percentile: float = 99.0
    forget_bias: float = 0.0

    def __post_init__(self):
        if self.steps not in ("fcn", "both"):
            raise ValueError("train.steps must be 'fcn' or 'both'")


@dataclass
class RegionSection:
    size: tuple[int, int]
    margin: float = 0.5
    train_noise: float = 0.1

    def spec(self, base: RegionSpec) -> RegionSpec:
        return RegionSpec(base.kind, tuple(self.size), base.mapping, self.margin, self.train_noise)


@dataclass
class CascadeSection:
    enabled: bool = False
    epochs: int = 10
    lr: float = 1e-3
    eyes: RegionSection = field(default_factory=lambda: RegionSection(EYE_REGION.size))
    mouth: RegionSection = field(default_factory=lambda: RegionSection(MOUTH_REGION.size))

    @classmethod
    def from_dict(cls, d: dict | None) -> CascadeSection:
        d = dict(d or {})
        for k, base in (("eyes", EYE_REGION), ("mouth", MOUTH_REGION)):
            if k in d:
                d[k] = _strict(RegionSection, {"size": base.size, **d[k]}, f"cascade.{k}")
                d[k].size = tuple(d[k].size)
        return _strict(cls, d, "cascade")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimSection = field(default_factory=OptimSection)
    data: SynthConfig = field(default_factory=SynthConfig)
    train: TrainSection = field(default_factory=TrainSection)
    cascade: CascadeSection = field(default_factory=CascadeSection)

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> ExperimentConfig:
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(
            seed=int(d.get("seed", 0)),
            output=str(d.get("output", "runs")),
            model=ModelConfig.from_dict(d.get("model", {})),
            loss=_strict(LossConfig, d.get("loss"), "loss"),
            optim=_strict(OptimSection, d.get("optim"), "optim"),
            data=SynthConfig.from_dict(d.get("data", {})),
            train=_strict(TrainSection, d.get("train"), "train"),
            cascade=CascadeSection.from_dict(d.get("cascade")),
        )
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.seed = int(env[SEED_ENV])
        return cfg

    @classmethod
    def from_json(cls, path: str | Path, env: dict | None = None) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()), env)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["data"]["size"] = list(self.data.size)
        d["data"]["split_ratio"] = list(self.data.split_ratio)
        for k in ("eyes", "mouth"):
            d["cascade"][k]["size"] = list(self.cascade.__dict__[k].size)
        return d


def input_hash(cfg: ExperimentConfig, clips: list[Clip]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    h.update(dataset_digest(clips).encode())
    return h.hexdigest()


# --- pipeline steps ------------------------------------------------------------

def train_baseline(cfg: ExperimentConfig, train: list[Clip], val: list[Clip],
                   history: list[dict] | None = None, dump_dir: Path | None = None) -> ModelGraph:
    """Step one: the plain FCN trained with cross-entropy on single frames."""
    t = cfg.train
    m = build_mini_fcn(cfg.model, seed=cfg.seed)
    fit(m, train, val, LossConfig("cross_entropy"), OptimizerConfig(base_lr=t.fcn_lr),
        FitConfig(t.fcn_epochs, 1, t.fcn_batch, cfg.seed), "fcn", history, dump_dir)
    return m


def convert(cfg: ExperimentConfig, fcn: ModelGraph, train: list[Clip]) -> ModelGraph:
    t = cfg.train
    scale = classifier_logit_scale(fcn, train, q=t.logit_percentile) if t.seed_from_classifier else 1.0
    return convert_to_convlstm_fcn(fcn, t.T, t.peephole, t.seed_from_classifier, cfg.seed,
                                   logit_scale=scale, forget_bias=t.forget_bias)


def train_convlstm(cfg: ExperimentConfig, fcn: ModelGraph, train: list[Clip], val: list[Clip],
                   loss: LossConfig | None = None, history: list[dict] | None = None,
                   dump_dir: Path | None = None) -> ModelGraph:
    """Step two: convert the baseline and train with the configured loss."""
    m = convert(cfg, fcn, train)
    oc = cfg.optim.build(m.param_groups().values())
    t = cfg.train
    fit(m, train, val, loss or cfg.loss, oc, FitConfig(t.epochs, t.T, t.N, cfg.seed),
        "convlstm", history, dump_dir)
    return m


def train_region_model(cfg: ExperimentConfig, spec: RegionSpec, train: list[Clip],
                       val: list[Clip], history: list[dict] | None = None) -> ModelGraph:
    """A zoomed-in sub-model (plain FCN, cross-entropy) on ground-truth crops."""
    c = cfg.cascade
    rtr = region_clips(train, spec, cfg.train.T, seed=cfg.seed)
    rva = region_clips(val, spec, cfg.train.T, seed=cfg.seed + 1, noise=0.0)
    mc = ModelConfig(**{**cfg.model.__dict__, "input_size": (spec.size[1], spec.size[0]),
                        "num_classes": len(spec.mapping)})
    m = build_mini_fcn(mc, seed=cfg.seed)
    fit(m, rtr, rva, LossConfig("cross_entropy"), OptimizerConfig(base_lr=c.lr),
        FitConfig(c.epochs, 1, cfg.train.fcn_batch, cfg.seed), spec.kind, history)
    return m


def train_cascade(cfg: ExperimentConfig, primary: ModelGraph, train: list[Clip],
                  val: list[Clip], history: list[dict] | None = None) -> CascadeBundle:
    eyes = cfg.cascade.eyes.spec(EYE_REGION)
    mouth = cfg.cascade.mouth.spec(MOUTH_REGION)
    return CascadeBundle(primary, train_region_model(cfg, eyes, train, val, history),
                         train_region_model(cfg, mouth, train, val, history),
                         eyes, mouth, window=cfg.train.T)


def run_experiment(cfg: ExperimentConfig, clips: list[Clip], run_dir: str | Path) -> dict:
    """Train everything the config asks for and write the run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    train, val = split_clips(clips, "train"), split_clips(clips, "val")
    if not train:
        raise ValueError("dataset has no training clips")
    write_json(run_dir / "config.json", cfg.to_dict())
    (run_dir / "seed").write_text(f"{cfg.seed}\n")
    digest = input_hash(cfg, clips)
    (run_dir / "inputs.sha256").write_text(digest + "\n")
    history: list[dict] = []
    out = {"run_dir": str(run_dir), "seed": cfg.seed, "inputs_sha256": digest}
    dump = run_dir / "diagnostics"
    try:
        fcn = train_baseline(cfg, train, val, history, dump)
        fcn.save(run_dir / "fcn.ssk", {"seed": cfg.seed})
        out["fcn"] = str(run_dir / "fcn.ssk")
        primary = fcn
        if cfg.train.steps == "both":
            m = train_convlstm(cfg, fcn, train, val, history=history, dump_dir=dump)
            m.save(run_dir / "model.ssk", {"seed": cfg.seed, "loss": asdict(cfg.loss)})
            out["model"] = str(run_dir / "model.ssk")
            primary = m
        if cfg.cascade.enabled:
            bundle = train_cascade(cfg, primary, train, val, history)
            bundle.eye_model.save(run_dir / "eyes.ssk", {"seed": cfg.seed})
            bundle.mouth_model.save(run_dir / "mouth.ssk", {"seed": cfg.seed})
            out["eyes"], out["mouth"] = str(run_dir / "eyes.ssk"), str(run_dir / "mouth.ssk")
    finally:
        (run_dir / "metrics.csv").write_text(history_csv(history))
    write_json(run_dir / "summary.json", out)
    return out
