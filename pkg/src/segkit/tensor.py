"""Minimal N-d array engine with a recorded tape for reverse-mode differentiation.

Only the operations the segmentation models need are provided. All arithmetic
is float64. A ``Tape`` must be active (``with Tape(): ...``) for operations to
be recorded; outside a tape every operation is a plain forward computation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: tuple[Tape, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only list of recorded operations."""

    nodes: list[Node] = field(default_factory=list)

    def record(self, kind: str, inputs: tuple[Tensor, ...], vjp) -> int:
        node_id = len(self.nodes)
        self.nodes.append(Node(node_id, kind, inputs, vjp))
        return node_id

    def kinds(self) -> list[str]:
        return [n.kind for n in self.nodes]

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_TAPES: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap ``data`` as the output of an operation and record it if needed.

    ``vjp`` maps the output cotangent to one cotangent (or None) per input.
    Custom fused operations (losses) register themselves through this hook.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = (tape, tape.record(kind, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise RuntimeError("loss was not produced on an active tape")
    tape, top = loss.node
    pending: dict[int, np.ndarray] = {top: np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: top + 1]):
        g = pending.pop(node.id, None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif t.node[0] is tape:
                nid = t.node[1]
                pending[nid] = gi if nid not in pending else pending[nid] + gi
            # non-leaf from another tape: treated as a constant


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("add_scalar", a.data + float(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return record("add_scalar", a.data - float(b), (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record("scale", a.data * s, (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large |x|
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, tanh, relu, scale."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    binary = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if op in unary:
        return unary[op](a)
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        return binary[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# --- shape plumbing --------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` along new leading axes so that it has ``shape``."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    if lead < 0 or shape[lead:] != a.shape:
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(range(lead))
    return record("expand", np.broadcast_to(a.data, shape).copy(), (a,),
                  lambda g: (g.sum(axis=axes),))


def take(a: Tensor, index: int, axis: int) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record("take", np.take(a.data, index, axis=axis), (a,), vjp)


def stack(items: Sequence[Tensor], axis: int) -> Tensor:
    items = tuple(items)
    for t in items[1:]:
        _check_same(items[0], t, "stack")
    n = len(items)
    return record("stack", np.stack([t.data for t in items], axis=axis), items,
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return record("sum", np.asarray(a.data.sum()), (a,),
                  lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("mean", np.asarray(a.data.mean()), (a,),
                  lambda g: (np.broadcast_to(g / n, shape).copy(),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (a,), vjp)


def softmax_channels(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"softmax_channels expects [N,C,H,W], got {a.shape}")
    return softmax(a, axis=1)


def to_rows(a: Tensor) -> Tensor:
    """[N,C,H,W] -> [N*H*W, C], one row per pixel."""
    n, c, h, w = a.shape
    return reshape(transpose(a, (0, 2, 3, 1)), (n * h * w, c))


# --- convolution / pooling / resampling ------------------------------------

def same_padding(size: int, k: int, stride: int, dilation: int) -> tuple[int, int]:
    """Symmetric zero padding; the odd pixel goes to the bottom/right."""
    eff = dilation * (k - 1) + 1
    out = -(-size // stride)
    total = max((out - 1) * stride + eff - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, k: int, stride: int, dilation: int, pad_total: int) -> int:
    return (size + pad_total - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dil: int, ho: int, wo: int,
             ) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, shape=(n, c, kh, kw, ho, wo),
                      strides=(sn, sc, dil * sh, dil * sw, stride * sh, stride * sw),
                      writeable=False)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: str = "valid") -> Tensor:
    """2-d cross-correlation, [N,C_in,H,W] * [C_out,C_in,kh,kw] -> [N,C_out,H',W']."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci} "
                         f"(input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or dilation < 1 or kh < 1 or kw < 1:
        raise ValueError("conv2d: stride, dilation and kernel size must be positive")
    if padding == "same":
        pt, pb = same_padding(h, kh, stride, dilation)
        pl, pr = same_padding(w, kw, stride, dilation)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    ho = conv_output_size(h, kh, stride, dilation, pt + pb)
    wo = conv_output_size(w, kw, stride, dilation, pl + pr)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output {ho}x{wo} for input {h}x{w}, kernel "
                         f"{kh}x{kw}, stride {stride}, dilation {dilation}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x.data
    cols = _windows(np.ascontiguousarray(xp), kh, kw, stride, dilation, ho, wo)
    wd = weight.data
    out = np.tensordot(wd, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.tensordot(wd, g, axes=([0], [1]))  # [C,kh,kw,N,ho,wo]
            gxp = np.zeros(xp.shape)
            for a in range(kh):
                r0 = a * dilation
                for b in range(kw):
                    c0 = b * dilation
                    gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                        c0:c0 + stride * (wo - 1) + 1:stride] += dcols[:, a, b].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pt:pt + h, pl:pl + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, vjp)


def max_pool2d(x: Tensor, k: int, stride: int, padding: str = "valid") -> Tensor:
    """Window max; ties resolve to the first position in row-major window order."""
    if k < 1 or stride < 1:
        raise ValueError("max_pool2d: k and stride must be positive")
    n, c, h, w = x.shape
    if padding == "same":
        pt, pb = same_padding(h, k, stride, 1)
        pl, pr = same_padding(w, k, stride, 1)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"max_pool2d: unknown padding {padding!r}")
    hp, wp = h + pt + pb, w + pl + pr
    if k > hp or k > wp:
        raise ShapeError(f"max_pool2d: window {k} larger than padded input {hp}x{wp}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = _windows(xp, k, k, stride, 1, ho, wo)  # [N,C,k,k,ho,wo]
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        rows = np.arange(ho)[:, None] * stride + arg // k
        cols = np.arange(wo)[None, :] * stride + arg % k
        plane = (np.arange(n * c).reshape(n, c, 1, 1)) * (hp * wp)
        idx = (plane + rows * wp + cols).ravel()
        gxp = np.bincount(idx, weights=g.ravel(), minlength=n * c * hp * wp)
        gxp = gxp.reshape(n, c, hp, wp)
        return (gxp[:, :, pt:pt + h, pl:pl + w],)

    return record("max_pool2d", out, (x,), vjp)


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects [N,C,h,w], got {x.shape}")
    h, w = x.shape[2:]
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample: target {out_h}x{out_w} smaller than {h}x{w}")
    ah, aw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    out = np.einsum("ih,nchw,jw->ncij", ah, x.data, aw, optimize=True)
    return record("bilinear_upsample", out, (x,),
                  lambda g: (np.einsum("ih,ncij,jw->nchw", ah, g, aw, optimize=True),))
