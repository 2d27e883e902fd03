"""Convolutional LSTM cell with peephole connections, and clip/frame reshapes."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as ts
from .tensor import ShapeError, Tensor

GATES = ("i", "f", "c", "o")
PEEPHOLES = ("ci", "cf", "co")
PARAM_NAMES = (tuple(f"W_x{g}" for g in GATES) + tuple(f"W_h{g}" for g in GATES)
               + tuple(f"W_{p}" for p in PEEPHOLES) + tuple(f"b_{g}" for g in GATES))


class ConvLSTMCell:
    """Holds the gate kernels, peephole maps and biases of one ConvLSTM layer.

    Kernels are ``[hidden, in, k, k]`` (input path) and ``[hidden, hidden, k, k]``
    (recurrent path); peephole weights are full ``[hidden, H, W]`` maps.
    """

    def __init__(self, in_channels: int, hidden: int, kernel: int, spatial: tuple[int, int],
                 peephole: bool = True, params: dict[str, Tensor] | None = None):
        self.in_channels = in_channels
        self.hidden = hidden
        self.kernel = kernel
        self.spatial = tuple(spatial)
        self.peephole = peephole
        self.params = params if params is not None else self.zeros()
        self._validate()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k, hd, ci = self.kernel, self.hidden, self.in_channels
        out = {}
        for g in GATES:
            out[f"W_x{g}"] = (hd, ci, k, k)
            out[f"W_h{g}"] = (hd, hd, k, k)
            out[f"b_{g}"] = (hd,)
        if self.peephole:
            for p in PEEPHOLES:
                out[f"W_{p}"] = (hd, *self.spatial)
        return {n: out[n] for n in PARAM_NAMES if n in out}

    def zeros(self) -> dict[str, Tensor]:
        return {n: Tensor(np.zeros(s), requires_grad=True, name=n) for n, s in self.shapes().items()}

    def init(self, rng: np.random.Generator) -> ConvLSTMCell:
        """Uniform(+-1/sqrt(fan_in)) kernels; peepholes and biases zero."""
        for name, t in self.params.items():
            if name.startswith("W_x") or name.startswith("W_h"):
                fan_in = t.shape[1] * t.shape[2] * t.shape[3]
                bound = 1.0 / math.sqrt(fan_in)
                t.data[...] = rng.uniform(-bound, bound, size=t.shape)
            else:
                t.data[...] = 0.0
        return self

    def _validate(self) -> None:
        expected = self.shapes()
        if set(expected) != set(self.params):
            raise ShapeError(f"ConvLSTMCell: parameter names {sorted(self.params)} "
                             f"!= expected {sorted(expected)}")
        for n, s in expected.items():
            if self.params[n].shape != s:
                raise ShapeError(f"ConvLSTMCell: {n} has shape {self.params[n].shape}, expected {s}")

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_shape(self, n: int) -> tuple[int, int, int, int]:
        return (n, self.hidden, *self.spatial)

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        return convlstm_step(self, x, h_prev, c_prev)

    def sequence(self, xs: Tensor, h0: Tensor | None = None, c0: Tensor | None = None) -> Tensor:
        return convlstm_sequence(self, xs, h0, c0)


def _gate_pre(cell: ConvLSTMCell, g: str, x: Tensor, h: Tensor) -> Tensor:
    p = cell.params
    xa = ts.conv2d(x, p[f"W_x{g}"], p[f"b_{g}"], padding="same")
    return ts.add(xa, ts.conv2d(h, p[f"W_h{g}"], padding="same"))


def _peep(cell: ConvLSTMCell, name: str, pre: Tensor, c: Tensor) -> Tensor:
    if not cell.peephole:
        return pre
    w = ts.expand(cell.params[name], c.shape)
    return ts.add(pre, ts.mul(w, c))


def convlstm_step(cell: ConvLSTMCell, x: Tensor, h_prev: Tensor, c_prev: Tensor,
                  ) -> tuple[Tensor, Tensor]:
    n = x.shape[0]
    if x.ndim != 4 or x.shape[1] != cell.in_channels or x.shape[2:] != cell.spatial:
        raise ShapeError(f"convlstm_step: input {x.shape} does not match cell "
                         f"(in={cell.in_channels}, spatial={cell.spatial})")
    want = cell.state_shape(n)
    if h_prev.shape != want or c_prev.shape != want:
        raise ShapeError(f"convlstm_step: states {h_prev.shape}/{c_prev.shape}, expected {want}")
    i = ts.sigmoid(_peep(cell, "W_ci", _gate_pre(cell, "i", x, h_prev), c_prev))
    f = ts.sigmoid(_peep(cell, "W_cf", _gate_pre(cell, "f", x, h_prev), c_prev))
    c = ts.add(ts.mul(f, c_prev), ts.mul(i, ts.tanh(_gate_pre(cell, "c", x, h_prev))))
    o = ts.sigmoid(_peep(cell, "W_co", _gate_pre(cell, "o", x, h_prev), c))
    h = ts.mul(o, ts.tanh(c))
    return h, c


def convlstm_sequence(cell: ConvLSTMCell, xs: Tensor, h0: Tensor | None = None,
                      c0: Tensor | None = None, T: int | None = None) -> Tensor:
    """Run the recurrence over ``xs`` of shape ``[B,T,C,H,W]``; returns all hidden states."""
    if xs.ndim != 5:
        raise ShapeError(f"convlstm_sequence expects [B,T,C,H,W], got {xs.shape}")
    b, steps = xs.shape[:2]
    if T is not None and steps != T:
        raise ShapeError(f"convlstm_sequence: clip length {steps} != configured T={T}")
    if steps < 1:
        raise ShapeError("convlstm_sequence: need at least one frame")
    h = h0 if h0 is not None else Tensor(np.zeros(cell.state_shape(b)))
    c = c0 if c0 is not None else Tensor(np.zeros(cell.state_shape(b)))
    outs = []
    for t in range(steps):
        h, c = convlstm_step(cell, ts.take(xs, t, axis=1), h, c)
        outs.append(h)
    return ts.stack(outs, axis=1)


def reshape_frames_to_clips(x: Tensor, T: int) -> Tensor:
    """``[B*T,C,H,W] -> [B,T,C,H,W]``; consecutive frames form one clip."""
    if T < 1 or x.shape[0] % T:
        raise ShapeError(f"batch of {x.shape[0]} frames is not divisible by T={T}")
    return ts.reshape(x, (x.shape[0] // T, T, *x.shape[1:]))


def reshape_clips_to_frames(x: Tensor) -> Tensor:
    if x.ndim != 5:
        raise ShapeError(f"expected [B,T,C,H,W], got {x.shape}")
    b, t = x.shape[:2]
    return ts.reshape(x, (b * t, *x.shape[2:]))
