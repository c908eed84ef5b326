"""Dense tensors with a recording tape for reverse-mode differentiation.

Every differentiable op in this package funnels through :func:`_record`. When a
:class:`GradTape` is active and at least one input requires a gradient, the op
appends a node holding its inputs, its output and a closure that maps the
output gradient to input gradients. :func:`backward` replays the nodes in
reverse order.

Broadcasting is deliberately narrow: a second operand may be a scalar, or a
per-channel tensor shaped ``(B or 1, C, 1, ..., 1)`` against ``(B, C, ...)``.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ShapeError, TapeError

_DEBUG = os.environ.get("ESRT_DEBUG", "") not in ("", "0")
_TAPES: list["GradTape"] = []
_RELU_LOG: list[np.ndarray] | None = None
_RELU_REPLAY = None


def set_debug(flag: bool) -> None:
    """Toggle the finiteness assertion run after every recorded op."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        if isinstance(other, Tensor):
            raise ShapeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    result = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, inputs, result, bwd))
    return result


def backward(root: Tensor, tape: GradTape) -> dict:
    """Gradients of a scalar ``root`` w.r.t. every leaf recorded on ``tape``.

    Keys are leaf names, or the leaf tensor itself when it has no name.
    Leaves the root does not depend on receive zeros.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(root) not in produced:
        raise TapeError("root was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result: dict = {}
    seen: set[int] = set()
    for node in tape.nodes:
        for t in node.inputs:
            if not t.requires_grad or id(t) in produced or id(t) in seen:
                continue
            seen.add(id(t))
            key = t.name if t.name is not None else t
            if key in result:
                raise TapeError(f"two distinct leaves share the name {t.name!r}")
            g = grads.get(id(t))
            result[key] = Tensor(np.zeros_like(t.data) if g is None else g.astype(t.dtype, copy=False))
    return result


# ---------------------------------------------------------------- broadcasting

def _per_channel(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    if len(big) != len(small) or len(big) < 2:
        return False
    return small[0] in (1, big[0]) and small[1] == big[1] and all(d == 1 for d in small[2:])


def _result_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    if sa == sb:
        return sa
    if int(np.prod(sb)) == 1 and len(sb) <= len(sa):
        return sa
    if int(np.prod(sa)) == 1 and len(sa) <= len(sb):
        return sb
    if _per_channel(sa, sb):
        return sa
    if _per_channel(sb, sa):
        return sb
    raise ShapeError(f"cannot broadcast {sa} with {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    full = (1,) * lead + shape
    axes = tuple(i for i, d in enumerate(full) if d == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _record("add_scalar", (a,), a.data + c, lambda g: (g,))
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _result_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, b)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), ad * bd, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def elementwise(op: str, a, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale``."""
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * s,))


@contextmanager
def relu_masks(replay: Sequence[np.ndarray] | None = None):
    """Record the activation mask of every ReLU evaluated inside the block.

    With ``replay``, ReLUs reuse those masks in call order instead of
    thresholding their input, freezing the piecewise-linear region.
    """
    global _RELU_LOG, _RELU_REPLAY
    outer = (_RELU_LOG, _RELU_REPLAY)
    _RELU_LOG = []
    _RELU_REPLAY = iter(replay) if replay is not None else None
    try:
        yield _RELU_LOG
    finally:
        _RELU_LOG, _RELU_REPLAY = outer


def relu(a: Tensor) -> Tensor:
    if _RELU_REPLAY is not None:
        mask = next(_RELU_REPLAY)
        if mask.shape != a.shape:
            raise ShapeError("replayed ReLU mask does not match the call sequence")
    else:
        mask = a.data > 0
    if _RELU_LOG is not None:
        _RELU_LOG.append(mask)
    return _record("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = (1.0 / (1.0 + np.exp(-a.data))).astype(a.dtype)
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1 - y),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * np.sqrt(0.5)))
    y = (x * cdf).astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + x * pdf)).astype(x.dtype),)

    return _record("gelu", (a,), y, bwd)


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims).astype(a.dtype)
    count = a.size // max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(a.dtype),)

    return _record("mean", (a,), np.asarray(out), bwd)


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        z = np.zeros(shape, dtype=dtype)
        z[index] = g
        return (z,)

    return _record("slice", (a,), np.ascontiguousarray(a.data[index]), bwd)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis with an integer index array (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.intp)
    shape, dtype = a.shape, a.dtype

    def bwd(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(np.moveaxis(z, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (z,)

    return _record("take", (a,), np.take(a.data, idx, axis=axis), bwd)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product of ``...xNxd`` and ``...xdxM`` with equal leading extents."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batch extents differ: {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for {x.ndim}-d tensor")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), y, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a per-feature affine map."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        db = g.sum(axis=red) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gd
            dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True)
                         - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dg, db

    return _record("layer_norm", (x, gamma, beta), (xhat * gd + beta.data).astype(xd.dtype), bwd)
