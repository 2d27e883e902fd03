"""Central finite-difference gradient checking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

# relative errors are measured against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    checked: int
    ok: bool


@dataclass
class GradReport:
    params: list[ParamReport] = field(default_factory=list)
    tol: float = 1e-3
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and all(p.ok for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=math.nan)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if p.ok else 'FAIL'} {p.name}: max rel err {p.max_rel_error:.3e} "
               f"over {p.checked} entries" for p in self.params]
        if self.error:
            out.append(f"FAIL {self.error}")
        return out


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
                      tol: float = 1e-3, max_entries: int | None = None,
                      rng: np.random.Generator | None = None,
                      names: Sequence[str] | None = None) -> GradReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` is re-evaluated with each parameter entry nudged by ``±eps``. When
    ``max_entries`` is set only that many randomly chosen entries per parameter
    are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    report = GradReport(tol=tol)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    rng = rng if rng is not None else np.random.default_rng(0)

    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with Tape():
            out = f()
            if not np.all(np.isfinite(out.data)):
                report.error = "non-finite function value"
                return report
            backward(out)
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

        for p, name, ga in zip(params, names, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(idx.size)
            for k, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + eps
                fp = f().item()
                flat[j] = orig - eps
                fm = f().item()
                flat[j] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    report.error = f"non-finite function value probing {name}[{j}]"
                    return report
                numeric[k] = (fp - fm) / (2 * eps)
            err = relative_error(ga.reshape(-1)[idx], numeric)
            worst = float(err.max()) if err.size else 0.0
            report.params.append(ParamReport(name, worst, int(idx.size), worst < tol))
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad = rg
            p.grad = g
    return report


# --- registered op set ---------------------------------------------------------

def _spread(rng: np.random.Generator, shape, lo: float = 0.1) -> np.ndarray:
    """Random values kept at least ``lo`` away from zero (clear of relu kinks)."""
    v = rng.uniform(lo, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Entries spaced 0.01 apart in random order, so max-pool never ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 - n * 0.005).reshape(shape)


def _leaf(a: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


def _op_checks(rng: np.random.Generator):
    from . import tensor as ts

    def unary(name, op, data):
        x = _leaf(data, "x")
        w = rng.normal(size=op(x).shape)
        return name, lambda: ts.sum(ts.mul(op(x), Tensor(w))), [x]

    def binary(name, op):
        a = _leaf(rng.normal(size=(3, 4)), "a")
        b = _leaf(rng.normal(size=(3, 4)), "b")
        w = rng.normal(size=(3, 4))
        return name, lambda: ts.sum(ts.mul(op(a, b), Tensor(w))), [a, b]

    yield binary("add", ts.add)
    yield binary("sub", ts.sub)
    yield binary("mul", ts.mul)
    yield unary("scale", lambda x: ts.scale(x, -1.7), rng.normal(size=(5,)))
    yield unary("sigmoid", ts.sigmoid, rng.normal(size=(2, 5)) * 3)
    yield unary("tanh", ts.tanh, rng.normal(size=(2, 5)) * 2)
    yield unary("relu", ts.relu, _spread(rng, (2, 5)))
    yield unary("reshape", lambda x: ts.reshape(x, (6, 2)), rng.normal(size=(3, 4)))
    yield unary("transpose", lambda x: ts.transpose(x, (2, 0, 1)), rng.normal(size=(2, 3, 4)))
    yield unary("expand", lambda x: ts.expand(x, (3, 2, 4)), rng.normal(size=(2, 4)))
    yield unary("take", lambda x: ts.take(x, 1, axis=1), rng.normal(size=(2, 3, 4)))
    yield unary("mean", lambda x: ts.reshape(ts.mean(x), (1,)), rng.normal(size=(3, 4)))
    yield unary("softmax", lambda x: ts.softmax(x, axis=1), rng.normal(size=(4, 5)) * 2)
    yield unary("softmax_channels", ts.softmax_channels, rng.normal(size=(2, 3, 2, 2)))
    yield unary("to_rows", ts.to_rows, rng.normal(size=(2, 3, 2, 2)))
    yield unary("bilinear_upsample", lambda x: ts.bilinear_upsample(x, 7, 9),
                rng.normal(size=(1, 2, 3, 4)))
    for k, stride, pad in ((2, 2, "valid"), (3, 2, "same")):
        yield unary(f"max_pool2d k{k} s{stride} {pad}",
                    lambda x, k=k, s=stride, p=pad: ts.max_pool2d(x, k, s, p),
                    _distinct(rng, (1, 2, 6, 6)))

    def stacked():
        a = _leaf(rng.normal(size=(2, 3)), "a")
        b = _leaf(rng.normal(size=(2, 3)), "b")
        w = rng.normal(size=(2, 2, 3))
        return "stack", lambda: ts.sum(ts.mul(ts.stack([a, b], axis=1), Tensor(w))), [a, b]

    yield stacked()
    for stride, dil in ((1, 1), (2, 1), (1, 2)):
        x = _leaf(rng.normal(size=(2, 3, 7, 7)), "x")
        wt = _leaf(rng.normal(size=(4, 3, 3, 3)) * 0.3, "weight")
        b = _leaf(rng.normal(size=(4,)), "bias")
        out_w = rng.normal(size=ts.conv2d(x, wt, b, stride, dil, "same").shape)
        yield (f"conv2d+sigmoid s{stride} d{dil}",
               lambda x=x, wt=wt, b=b, s=stride, d=dil, ow=out_w: ts.sum(ts.mul(
                   ts.sigmoid(ts.conv2d(x, wt, b, s, d, "same")), Tensor(ow))),
               [x, wt, b])


def _loss_checks(rng: np.random.Generator):
    from . import tensor as ts
    from .losses import (LossConfig, compute_soft_region_stats, cross_entropy,
                         iou_loss_multiclass, one_hot, seg_loss)

    k, c = 12, 4
    labels = rng.integers(0, c, size=k)
    oh = one_hot(labels, c)
    s = _leaf(rng.normal(size=(k, c)) * 2, "scores")
    yield "cross_entropy", lambda: cross_entropy(s, labels), [s]
    yield "iou_loss", lambda: iou_loss_multiclass(ts.softmax(s, axis=1), oh), [s]
    z = s.data - s.data.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    stats = compute_soft_region_stats(p, oh)
    for variant, g in (("hinge", 1.0), ("hinge", 0.1), ("linear", 0.0)):
        cfg = LossConfig("segmentation", variant, g)
        yield (f"seg_loss {variant} g={g}", lambda cfg=cfg: seg_loss(s, labels, stats, cfg), [s])


def _convlstm_checks(rng: np.random.Generator):
    from . import tensor as ts
    from .convlstm import ConvLSTMCell, convlstm_sequence

    for kernel in (1, 3):
        cell = ConvLSTMCell(3, 2, kernel, (4, 4)).init(rng)
        for p in cell.params.values():
            p.data[...] = rng.normal(size=p.shape) * 0.5
        xs = _leaf(rng.normal(size=(2, 3, 3, 4, 4)), "xs")
        w = rng.normal(size=(2, 3, 2, 4, 4))
        names = ["xs", *cell.params]
        yield (f"convlstm sequence k{kernel}",
               lambda cell=cell, xs=xs, w=w: ts.sum(ts.mul(convlstm_sequence(cell, xs), Tensor(w))),
               [xs, *cell.params.values()], names)


def composite_checks(rng: np.random.Generator, T: int = 2, clips: int = 1):
    """Mini ConvLSTM-FCN on 16x16 inputs feeding each of the three losses."""
    from . import tensor as ts
    from .losses import LossConfig, compute_soft_region_stats, one_hot
    from .models import ModelConfig, StageConfig, build_mini_fcn, convert_to_convlstm_fcn
    from .train import compute_loss

    cfg = ModelConfig(input_size=(16, 16), stages=[StageConfig(3), StageConfig(4), StageConfig(4),
                                                   StageConfig(4, stride=1, dilation=2)])
    fcn = build_mini_fcn(cfg, seed=int(rng.integers(2**31)))
    m = convert_to_convlstm_fcn(fcn, T, seed_from_classifier=False, seed=int(rng.integers(2**31)))
    for name, p in m.params.items():
        if name.endswith("bias") or name.split("/")[-1].startswith("b_"):
            p.data[...] = rng.normal(size=p.shape) * 0.1
    x = Tensor(rng.normal(size=(clips * T, 3, 16, 16)))
    labels = rng.integers(0, 5, size=(clips * T, 16, 16))
    for loss in (LossConfig("cross_entropy"), LossConfig("iou"),
                 LossConfig("segmentation", "linear", 0.0), LossConfig("segmentation", "hinge", 1.0)):
        if loss.kind == "segmentation":
            rows = ts.to_rows(m.forward(x)).data
            z = np.exp(rows - rows.max(axis=1, keepdims=True))
            stats = compute_soft_region_stats(z / z.sum(axis=1, keepdims=True),
                                              one_hot(labels.reshape(-1), 5))

            def f(loss=loss, stats=stats):
                from .losses import seg_loss
                return seg_loss(ts.to_rows(m.forward(x)), labels.reshape(-1), stats, loss)
        else:
            def f(loss=loss):
                return compute_loss(m.forward(x), labels, loss)
        tag = loss.kind if loss.kind != "segmentation" else f"seg_loss {loss.variant}"
        yield f"model -> {tag}", f, list(m.params.values()), list(m.params)


def run_registered(eps: float = 1e-4, tol: float = 1e-3, seed: int = 0,
                   entries_per_param: int = 5, composite: bool = True,
                   ) -> list[tuple[str, GradReport]]:
    """Finite-difference check of every registered op, loss and the composed model."""
    rng = np.random.default_rng(seed)
    out = []
    groups = [_op_checks(rng), _loss_checks(rng), _convlstm_checks(rng)]
    for group in groups:
        for item in group:
            name, f, params = item[:3]
            names = item[3] if len(item) > 3 else None
            out.append((name, finite_diff_check(f, params, eps, tol, names=names, rng=rng)))
    if composite:
        for name, f, params, names in composite_checks(rng):
            out.append((name, finite_diff_check(f, params, eps, tol, entries_per_param, rng,
                                                names)))
    return out
