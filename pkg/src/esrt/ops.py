"""Spatial network primitives on ``B x C x H x W`` tensors.

All ops are stride-1 / same-size unless noted, and each carries its own
backward rule so the tape stays short for large feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgError, ShapeError
from .tensor import Tensor, _record, reshape, take, transpose


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    has_bias: bool = True

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


@dataclass(frozen=True)
class UnfoldSpec:
    kernel: int = 3

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``B x C x H x W`` -> ``(B*H*W) x (C*k*k)`` with zero same-padding."""
    b, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B C H W k k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Overlap-add inverse of :func:`_im2col` (adjoint, no normalization)."""
    b, c, h, w = shape
    p = (k - 1) // 2
    cols = cols.reshape(b, h, w, c, k, k)
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out[:, :, p:p + h, p:p + w]


def _taps(x: np.ndarray, k: int) -> np.ndarray:
    """``B x C x H x W`` -> ``(B*H*W) x (k*k*C)``, tap-major, for convolution."""
    b, c, h, w = x.shape
    p = (k - 1) // 2
    xp = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + h, j:j + w]
    return cols.reshape(b * h * w, k * k * c)


def _untaps(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`_taps`."""
    b, c, h, w = shape
    p = (k - 1) // 2
    cols = cols.reshape(b, h, w, k, k, c)
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + h, j:j + w] += cols[:, :, :, i, j]
    return np.ascontiguousarray(out[:, p:p + h, p:p + w].transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, spec: Conv2dSpec | None = None) -> Tensor:
    """Same-padded stride-1 cross-correlation; ``w`` is ``Cout x Cin x k x k``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B x C x H x W, got {x.shape}")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {w.shape}")
    if spec is not None and (spec.in_channels, spec.out_channels, spec.kernel) != (cin, cout, k):
        raise ShapeError(f"weight {w.shape} does not match {spec}")
    bsz, c, h, wd = x.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight expects {cin}")

    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin) if k == 1 else _taps(x.data, k)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(bsz, h, wd, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.ascontiguousarray((gm.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gc = gm @ wmat
            if k == 1:
                gx = np.ascontiguousarray(gc.reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2))
            else:
                gx = _untaps(gc, x.shape, k)
        return (gx, gw) if b is None else (gx, gw, gb)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, bwd)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling (stride ``k``)."""
    bsz, c, h, w = x.shape
    if k < 1:
        raise ArgError(f"pool size must be >= 1, got {k}")
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(bsz, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bwd(g):
        return (np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3).astype(x.dtype),)

    return _record("avg_pool2d", (x,), out.astype(x.dtype), bwd)


def upsample_nearest(x: Tensor, k: int) -> Tensor:
    if k < 1:
        raise ArgError(f"upsample factor must be >= 1, got {k}")
    bsz, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bwd(g):
        return (g.reshape(bsz, c, h, k, w, k).sum(axis=(3, 5)),)

    return _record("upsample_nearest", (x,), out, bwd)


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """``n_out x n_in`` interpolation weights, half-pixel centres, no corner alignment."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ArgError(f"output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(w, out_w, x.dtype)
    out = np.einsum("oh,bchw,pw->bcop", mh, x.data, mw, optimize=True)

    def bwd(g):
        return (np.einsum("oh,bcop,pw->bchw", mh, g, mw, optimize=True),)

    return _record("resize_bilinear", (x,), out, bwd)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``B x (C r^2) x H x W`` -> ``B x C x rH x rW``."""
    bsz, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ShapeError(f"{c} channels not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    y = reshape(x, (bsz, oc, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (bsz, oc, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    bsz, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {r}")
    y = reshape(x, (bsz, c, h // r, r, w // r, r))
    y = transpose(y, (0, 1, 3, 5, 2, 4))
    return reshape(y, (bsz, c * r * r, h // r, w // r))


def _check_unfold(spec: UnfoldSpec) -> int:
    k = spec.kernel
    if k < 1 or k % 2 == 0:
        raise ArgError(f"unfold kernel must be odd, got {k}")
    return k


def unfold(x: Tensor, spec: UnfoldSpec = UnfoldSpec()) -> Tensor:
    """``B x C x H x W`` -> ``B x (C k^2) x (H W)``; column ``i`` is pixel ``i``'s neighbourhood.

    Row index within a column is ``c * k^2 + di * k + dj`` (channel-major).
    """
    k = _check_unfold(spec)
    bsz, c, h, w = x.shape
    n = h * w
    cols = _im2col(x.data, k).reshape(bsz, n, c * k * k)
    out = np.ascontiguousarray(cols.transpose(0, 2, 1))

    def bwd(g):
        return (_col2im(g.transpose(0, 2, 1).reshape(bsz * n, -1), x.shape, k),)

    return _record("unfold", (x,), out, bwd)


def overlap_count(h: int, w: int, k: int, dtype=np.float32) -> np.ndarray:
    """How many unfold columns touch each pixel (edge pixels see fewer)."""
    ones = np.ones((1, 1, h, w), dtype=dtype)
    return _col2im(_im2col(ones, k), ones.shape, k)[0, 0]


def fold(cols: Tensor, spec: UnfoldSpec, h: int, w: int) -> Tensor:
    """Normalized overlap-add, the left inverse of :func:`unfold`."""
    k = _check_unfold(spec)
    bsz, ck, n = cols.shape
    if n != h * w:
        raise ShapeError(f"fold got {n} columns for a {h}x{w} map")
    if ck % (k * k):
        raise ShapeError(f"column height {ck} not divisible by k^2 = {k * k}")
    c = ck // (k * k)
    count = overlap_count(h, w, k, cols.dtype)
    # accumulate in float64 so fold(unfold(x)) is exact up to one final rounding
    flat = cols.data.transpose(0, 2, 1).reshape(bsz * n, ck).astype(np.float64)
    summed = _col2im(flat, (bsz, c, h, w), k) / count.astype(np.float64)

    def bwd(g):
        gn = g / count
        return (np.ascontiguousarray(_im2col(gn, k).reshape(bsz, n, ck).transpose(0, 2, 1)),)

    return _record("fold", (cols,), summed.astype(cols.dtype), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; ``w`` is ``Dout x Din``."""
    dout, din = w.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear expects last dim {din}, got {x.shape}")
    lead = x.shape[:-1]
    xm = x.data.reshape(-1, din)
    out = xm @ w.data.T
    if b is not None:
        out += b.data

    def bwd(g):
        gm = g.reshape(-1, dout)
        gx = (gm @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = gm.T @ xm if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (gm.sum(axis=0) if b.requires_grad else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("linear", inputs, out.reshape(*lead, dout), bwd)


def pad_reflect(x: Tensor, bottom: int, right: int) -> Tensor:
    """Reflect-pad the bottom/right edges of a ``B x C x H x W`` map."""
    if bottom:
        x = take(x, np.pad(np.arange(x.shape[2]), (0, bottom), mode="reflect"), axis=2)
    if right:
        x = take(x, np.pad(np.arange(x.shape[3]), (0, right), mode="reflect"), axis=3)
    return x
