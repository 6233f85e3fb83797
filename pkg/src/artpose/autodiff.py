"""Reverse-mode automatic differentiation over dense float64 tensors.

A `Tape` records every differentiable operation in creation order, which is
already a topological order: an operation can only consume tensors that were
created before it. `backward` walks the tape once, in reverse, accumulating
gradients additively so tensors used several times receive the sum of their
contributions.

Everything is float64. Desk-scale problem sizes make speed irrelevant and
keep central finite differences trustworthy as an oracle.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base error for the tape engine."""


class ShapeError(AutodiffError):
    """Operand shapes do not conform for the requested op."""


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager around the forward computation:

        with Tape():
            loss = model(...)
            backward(loss)
    """

    def __init__(self) -> None:
        # each node is (output_tensor, [(input_tensor, pull_fn), ...])
        # where pull_fn maps the output gradient to that input's gradient
        self.nodes: list[tuple["Tensor", list[tuple["Tensor", Callable]]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array participating in the active tape.

    Tensors with requires_grad=False never accumulate gradient; constants
    (inputs, detached values) are simply tensors that no node pulls into.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected scalar")
        return float(self.data.reshape(()))

    def detach(self) -> np.ndarray:
        """Plain array view of the values, outside any tape."""
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=False, name=name)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# Recording and backward
# ---------------------------------------------------------------------------


def _record(out: Tensor, pulls: list[tuple[Tensor, Callable]]) -> Tensor:
    """Attach `out` to the active tape if any pulled input requires grad."""
    if any(t.requires_grad for t, _ in pulls):
        out.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            out.tape = tape
            tape.nodes.append((out, pulls))
    return out


def backward(loss: Tensor) -> None:
    """Populate grad on every requires_grad tensor reachable from `loss`.

    Gradients accumulate additively across multiple uses. A constant loss
    (nothing recorded) leaves all gradients untouched, i.e. zero.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return  # constant loss: all gradients are zero
    loss.grad = np.ones_like(loss.data)
    for out, pulls in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue  # not on a path to the loss
        for t, pull in pulls:
            if not t.requires_grad:
                continue
            piece = pull(g)
            if t.grad is None:
                t.grad = piece
            else:
                t.grad = t.grad + piece


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _broadcast_op(name: str, a: Tensor, b: Tensor, fwd) -> np.ndarray:
    try:
        return fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{name}: shapes {a.shape} vs {b.shape}") from e


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("add", a, b, np.add))
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("sub", a, b, np.subtract))
    return _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                         (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("mul", a, b, np.multiply))
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("div", a, b, np.divide))
    return _record(out, [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                         (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape))])


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, [(a, lambda g: -g)])


# ---------------------------------------------------------------------------
# Matrix multiply
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def pull_b(g):
        if b.data.ndim == 2 and a.data.ndim > 2:
            # weight gradient: flatten the batch into one GEMM
            k = a.shape[-1]
            return np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
        return _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)

    return _record(out, [
        (a, lambda g: _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)),
        (b, pull_b),
    ])


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0
    return _record(out, [(a, lambda g: g * mask)])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record(out, [(a, lambda g: g * y * (1.0 - y))])


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)
    return _record(out, [(a, lambda g: g * y)])


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, [(a, lambda g: g / a.data)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record(out, [(a, lambda g: g * 0.5 / y)])


def absolute(a) -> Tensor:
    # subgradient 0 at exactly 0
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return _record(out, [(a, lambda g: g * sign)])


def maximum(a, b) -> Tensor:
    # ties route gradient to the first operand
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("maximum", a, b, np.maximum))
    take_a = a.data >= b.data
    return _record(out, [(a, lambda g: _unbroadcast(g * take_a, a.shape)),
                         (b, lambda g: _unbroadcast(g * ~take_a, b.shape))])


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_broadcast_op("minimum", a, b, np.minimum))
    take_a = a.data <= b.data
    return _record(out, [(a, lambda g: _unbroadcast(g * take_a, a.shape)),
                         (b, lambda g: _unbroadcast(g * ~take_a, b.shape))])


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through wherever the value was kept."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = (a.data >= lo) & (a.data <= hi)
    return _record(out, [(a, lambda g: g * mask)])


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def pull(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _record(out, [(a, pull)])


# ---------------------------------------------------------------------------
# Reductions, shaping, indexing
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _record(out, [(a, pull)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.shape) / count
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape) / count

    return _record(out, [(a, pull)])


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, [(a, lambda g: g.reshape(a.shape))])


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.swapaxes(ax1, ax2))
    return _record(out, [(a, lambda g: g.swapaxes(ax1, ax2))])


def take(a, idx) -> Tensor:
    """Indexing/gather; supports basic slices and integer-array indexing."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def pull(g):
        g0 = np.zeros_like(a.data)
        np.add.at(g0, idx, g)
        return g0

    return _record(out, [(a, pull)])


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty tensor list")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        sl = [slice(None)] * out.data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, [(t, make_pull(i)) for i, t in enumerate(ts)])


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# Composite layers
# ---------------------------------------------------------------------------


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift (fused node)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    x_hat = xc * inv
    out = Tensor(x_hat * gain.data + bias.data)

    def pull_x(g):
        gh = g * gain.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - x_hat * (gh * x_hat).mean(axis=-1, keepdims=True))

    def pull_gain(g):
        return _unbroadcast(g * x_hat, gain.shape)

    def pull_bias(g):
        return _unbroadcast(g, bias.shape)

    return _record(out, [(x, pull_x), (gain, pull_gain), (bias, pull_bias)])


def linear(x, w, b) -> Tensor:
    """Fused affine map x @ w + b over the last axis."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: shapes {x.shape} vs {w.shape}")
    out = Tensor(np.matmul(x.data, w.data) + b.data)

    def pull_w(g):
        k = x.shape[-1]
        return np.matmul(x.data.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))

    def pull_b(g):
        return _unbroadcast(g, b.shape)

    return _record(out, [
        (x, lambda g: np.matmul(g, w.data.T)),
        (w, pull_w),
        (b, pull_b),
    ])


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention: softmax(q kᵀ / √d) v.

    q: (..., T_q, d), k: (..., T_k, d), v: (..., T_k, d_v).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} vs key dim {k.shape[-1]}")
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable, point, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps the point tensors to a scalar Tensor. `point` is one Tensor or
    a sequence of Tensors; each is treated as a parameter. The relative
    error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    points = list(point) if isinstance(point, (list, tuple)) else [point]
    for p in points:
        p.requires_grad = True
        p.zero_grad()

    with Tape():
        loss = f(*points)
        if loss.data.size != 1:
            raise ShapeError("grad_check: f must be scalar-valued")
        backward(loss)

    worst = 0.0
    for p in points:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*points).item()
            flat[i] = orig - eps
            lo = f(*points).item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise AutodiffError(f"grad_check: non-finite value at perturbed point (coord {i})")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"APCKPT\x00"
_CKPT_VERSION = 1


def save_params(params: dict[str, Tensor], path) -> None:
    """Write named parameters: magic, version, then (name, shape, float64 LE) entries."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(params)))
        for name in sorted(params):
            data = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name], dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.astype("<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise AutodiffError(f"{path}: not a parameter checkpoint (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise AutodiffError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out
