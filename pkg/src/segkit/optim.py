"""Adam / RMSprop with layer-group learning rates, freezing and linear decay."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .tensor import Tensor

log = logging.getLogger(__name__)

CONVLSTM_GROUP = "convlstm"
GAMMA_PRESETS = (0.01, 0.02, 0.05, 0.1)


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    base_lr: float = 1e-3
    gamma: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    eps: float = 1e-8
    decay: bool = True
    total_steps: int = 0
    frozen_groups: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.kind not in ("adam", "rmsprop"):
            raise ValueError(f"optim.kind must be 'adam' or 'rmsprop', got {self.kind!r}")
        if not 0 < self.gamma <= 1:
            raise ValueError("optim.gamma must lie in (0, 1]")
        self.frozen_groups = frozenset(self.frozen_groups)

    def group_lr(self, group: str, lr: float) -> float:
        if group in self.frozen_groups:
            return 0.0
        return lr if group == CONVLSTM_GROUP else lr * self.gamma


def freeze_all_but_convlstm(groups) -> frozenset[str]:
    return frozenset(g for g in set(groups) if g != CONVLSTM_GROUP)


def lr_at(step: int, total: int, cfg: OptimizerConfig, groups) -> dict[str, float]:
    """Per-group learning rate after ``step`` of ``total`` linearly decayed steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.decay and total > 0:
        if step > total:
            log.warning("step %d beyond decay horizon %d; learning rate clamped to 0", step, total)
        base = cfg.base_lr * max(0.0, 1.0 - step / total)
    else:
        base = cfg.base_lr
    return {g: cfg.group_lr(g, base) for g in sorted(set(groups))}


class Optimizer:
    """Updates a named parameter set in place.

    ``groups`` maps parameter name to its learning-rate group.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, str], cfg: OptimizerConfig):
        self.params = params
        self.groups = groups
        self.cfg = cfg
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def trainable(self) -> list[str]:
        return [n for n in self.params if self.groups[n] not in self.cfg.frozen_groups]

    def current_lrs(self) -> dict[str, float]:
        return lr_at(self.t, self.cfg.total_steps, self.cfg, self.groups.values())

    def step(self) -> None:
        lrs = self.current_lrs()
        self.t += 1
        for name, p in self.params.items():
            lr = lrs[self.groups[name]]
            if self.groups[name] in self.cfg.frozen_groups:
                continue
            if p.grad is None:
                raise ValueError(f"parameter {name} has no gradient")
            self._update(name, p, p.grad, lr)

    def _update(self, name: str, p: Tensor, g: np.ndarray, lr: float) -> None:
        raise NotImplementedError

    def save(self, path: str | Path) -> None:
        arrays = {f"{name}/{k}": v for name, st in self.state.items() for k, v in st.items()}
        save_arrays(path, arrays, {"t": self.t, "kind": self.cfg.kind})

    def load(self, path: str | Path) -> None:
        arrays, meta = load_arrays(path)
        self.t = int(meta["t"])
        self.state = {}
        for key, v in arrays.items():
            name, k = key.rsplit("/", 1)
            self.state.setdefault(name, {})[k] = v


class Adam(Optimizer):
    def _update(self, name, p, g, lr):
        st = self.state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        st["m"] = b1 * st["m"] + (1 - b1) * g
        st["v"] = b2 * st["v"] + (1 - b2) * g * g
        mhat = st["m"] / (1 - b1 ** self.t)
        vhat = st["v"] / (1 - b2 ** self.t)
        p.data -= lr * mhat / (np.sqrt(vhat) + self.cfg.eps)


class RMSprop(Optimizer):
    def _update(self, name, p, g, lr):
        st = self.state.setdefault(name, {"v": np.zeros_like(p.data)})
        rho = self.cfg.rho
        st["v"] = rho * st["v"] + (1 - rho) * g * g
        p.data -= lr * g / (np.sqrt(st["v"]) + self.cfg.eps)


def make_optimizer(params: dict[str, Tensor], groups: dict[str, str], cfg: OptimizerConfig,
                   ) -> Optimizer:
    return (Adam if cfg.kind == "adam" else RMSprop)(params, groups, cfg)


def adam_step(params, grads, state, cfg: OptimizerConfig, lr: float | None = None):
    """Functional single Adam step on parallel lists of arrays; returns (params, state)."""
    t = state.get("t", 0) + 1
    lr = cfg.base_lr if lr is None else lr
    m = state.get("m") or [np.zeros_like(p) for p in params]
    v = state.get("v") or [np.zeros_like(p) for p in params]
    out, m2, v2 = [], [], []
    for p, g, mi, vi in zip(params, grads, m, v):
        mi = cfg.beta1 * mi + (1 - cfg.beta1) * g
        vi = cfg.beta2 * vi + (1 - cfg.beta2) * g * g
        step = lr * (mi / (1 - cfg.beta1 ** t)) / (np.sqrt(vi / (1 - cfg.beta2 ** t)) + cfg.eps)
        out.append(p - step)
        m2.append(mi)
        v2.append(vi)
    return out, {"t": t, "m": m2, "v": v2}


def rmsprop_step(params, grads, state, cfg: OptimizerConfig, lr: float | None = None):
    lr = cfg.base_lr if lr is None else lr
    v = state.get("v") or [np.zeros_like(p) for p in params]
    out, v2 = [], []
    for p, g, vi in zip(params, grads, v):
        vi = cfg.rho * vi + (1 - cfg.rho) * g * g
        out.append(p - lr * g / (np.sqrt(vi) + cfg.eps))
        v2.append(vi)
    return out, {"v": v2}
