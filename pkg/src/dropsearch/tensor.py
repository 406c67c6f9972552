"""Dense arrays with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps an immutable numpy buffer. Ops executed while a
:class:`Tape` is active (``with Tape() as tape:``) and touching at least one
tensor with ``requires_grad`` are recorded; :func:`backward` replays the tape
in reverse to accumulate vector-Jacobian products.

Broadcasting is limited to a shared suffix: ``add``/``mul`` accept a second
operand whose shape is a trailing slice of the first (bias, per-channel
scale). Everything else requires equal shapes.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericalFault, ShapeError

MAX_KERNEL = 5
MAX_CHANNELS = 64

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@dataclass
class _Op:
    name: str
    out: "Tensor"
    parents: tuple
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of differentiable ops; confined to the creating thread."""

    ops: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.ops)

    def gradient(self, loss: "Tensor") -> "Gradients":
        return backward(self, loss)


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Gradients(dict):
    """Map from leaf tensor to its accumulated gradient."""

    def of(self, t: "Tensor") -> np.ndarray:
        g = self.get(t)
        return np.zeros(t.shape, dtype=t.dtype) if g is None else g


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64, name: str | None = None):
        arr = np.array(data, dtype=dtype)
        _check_finite("tensor", arr)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ContractError("division is only supported by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(x, dtype=dtype)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NumericalFault(f"{op}: non-finite value in output")


def _make(op: str, arr: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, arr)
    req = any(p.requires_grad for p in parents)
    out = Tensor._wrap(arr, req)
    if req:
        tape = _active_tape()
        if tape is not None:
            tape.ops.append(_Op(op, out, tuple(parents), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep over ``tape`` seeded with d(loss)/d(loss) = 1.

    Returns gradients for leaf tensors (``requires_grad`` and not produced by
    a recorded op) that the loss depends on.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.ops:
        raise ContractError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    produced = {id(op.out) for op in tape.ops}
    leaves: dict[int, Tensor] = {}
    for op in reversed(tape.ops):
        g = grads.get(id(op.out))
        if g is None:
            continue
        for p, pg in zip(op.parents, op.vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = p
    out = Gradients()
    for key, t in leaves.items():
        out[t] = grads[key]
    return out


# -- elementwise --------------------------------------------------------------

def _suffix_compatible(a: tuple, b: tuple) -> bool:
    return len(b) <= len(a) and a[len(a) - len(b):] == b


def _binary_operands(op: str, a, b) -> tuple[Tensor, Tensor, bool]:
    """Return (big, small, swapped) where small.shape is a suffix of big.shape."""
    a = as_tensor(a, a if isinstance(a, Tensor) else None)
    b = as_tensor(b, a)
    if _suffix_compatible(a.shape, b.shape):
        return a, b, False
    if _suffix_compatible(b.shape, a.shape):
        return b, a, True
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a, b) -> Tensor:
    big, small, _ = _binary_operands("add", a, b)
    return _make("add", big.data + small.data, (big, small),
                 lambda g: (g, _reduce_to(g, small.shape)))


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b, a if isinstance(a, Tensor) else None)))


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    big, small, _ = _binary_operands("mul", a, b)
    x, y = big.data, small.data
    return _make("mul", x * y, (big, small),
                 lambda g: (g * y, _reduce_to(g * x, small.shape)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _make("log", y, (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make("relu", np.where(keep, x.data, 0.0).astype(x.dtype), (x,),
                 lambda g: (g * keep,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


# -- shape ------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make("reshape", y.copy(), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"transpose: bad axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    y = np.array(x.data[idx])

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", y, (x,), vjp)


# -- reductions ---------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axis = (axis,) if np.isscalar(axis) else tuple(axis)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    y = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(y), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    x, y = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _make("matmul", x @ y, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid, stride-1 2-D convolution on NHWC input with an HWIO kernel.

    Accumulates over (kernel row, kernel col, input channel) in that order so
    results match a scalar quadruple loop bit for bit.
    """
    x = as_tensor(x)
    w = as_tensor(w, x)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    if kh > MAX_KERNEL or kw > MAX_KERNEL or ci > MAX_CHANNELS or co > MAX_CHANNELS:
        raise ContractError(f"conv2d: kernel {w.shape} exceeds desk-scale limits")
    oh, ow = h - kh + 1, wd - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape)
    xd, wdat = x.data, w.data
    out = np.zeros((n, oh, ow, co), dtype=np.result_type(xd, wdat))
    for i in range(kh):
        for j in range(kw):
            for c in range(ci):
                out += xd[:, i:i + oh, j:j + ow, c:c + 1] * wdat[i, j, c]

    def vjp(g):
        gx = np.zeros_like(xd, dtype=g.dtype)
        gw = np.zeros_like(wdat, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                patch = xd[:, i:i + oh, j:j + ow, :]
                gw[i, j] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                gx[:, i:i + oh, j:j + ow, :] += g @ wdat[i, j].T
        return gx, gw

    return _make("conv2d", out, (x, w), vjp)


# -- normalisation and probabilities -------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optionally scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    y = _make("layer_norm", xhat, (x,), vjp)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def embedding(weight: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise ContractError("embedding: indices must be integers")
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractError(f"embedding: index out of range for table of {weight.shape[0]} rows")

    def vjp(g):
        full = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("embedding", weight.data[idx], (weight,), vjp)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)
    n = targets.size
    loss = np.asarray(-picked.sum() / n, dtype=logits.dtype)

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (g / n),)

    return _make("cross_entropy", loss, (logits,), vjp)
