"""ESRT architecture: HFM, RU, ARFB, CA, HPB, EMHA, ET and the full forward pass.

Blocks are plain functions of an input tensor and a parameter scope. A scope
resolves short names (``"re.w"``) against a prefix inside one flat
:class:`ParamStore`, so the same function serves every instance of a block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ArgError, ConfigError, ShapeError
from .ops import (
    UnfoldSpec,
    avg_pool2d,
    conv2d,
    fold,
    linear,
    pad_reflect,
    pixel_shuffle,
    resize_bilinear,
    unfold,
    upsample_nearest,
)
from .tensor import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    mean,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    take,
    transpose,
)


@dataclass
class ModelConfig:
    channels: int = 32
    n_hpb: int = 3
    n_et: int = 1
    pool_k: int = 2
    unfold_k: int = 3
    split_s: int = 4
    heads_m: int = 8
    scale: int = 4
    hpb_shared_reps: int = 5
    mlp_ratio: int = 2
    ca_reduction: int = 4
    ln_eps: float = 1e-5

    @property
    def embed_dim(self) -> int:
        return self.channels * self.unfold_k ** 2

    def validate(self) -> "ModelConfig":
        ints = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ln_eps"}
        for key, value in ints.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if self.scale not in (2, 3, 4):
            raise ConfigError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.channels % 2:
            raise ConfigError("channels must be even so the residual unit can halve them")
        if self.unfold_k % 2 == 0:
            raise ConfigError("unfold_k must be odd")
        if self.embed_dim % 2:
            raise ConfigError("channels * unfold_k^2 must be even")
        if (self.embed_dim // 2) % self.heads_m:
            raise ConfigError(
                f"reduced embedding {self.embed_dim // 2} not divisible by {self.heads_m} heads")
        if self.channels < self.ca_reduction:
            raise ConfigError("ca_reduction exceeds channel count")
        if not self.ln_eps > 0:
            raise ConfigError("ln_eps must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: (float(v) if k == "ln_eps" else int(v)) for k, v in values.items()}
        return cls(**kwargs).validate()


class ParamStore(dict):
    """Ordered ``name -> Tensor`` map of every trainable weight."""

    def scope(self, prefix: str = "") -> "Scope":
        return Scope(self, prefix)

    def numel(self) -> int:
        return sum(t.size for t in self.values())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.astype(dtype), v.requires_grad, k)) for k, v in self.items())

    def copy(self) -> "ParamStore":
        return ParamStore((k, Tensor(v.data.copy(), v.requires_grad, k)) for k, v in self.items())

    def trainable(self, flag: bool = True) -> "ParamStore":
        for t in self.values():
            t.requires_grad = flag
        return self


class Scope:
    __slots__ = ("store", "prefix")

    def __init__(self, store, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self.prefix + key]

    def get(self, key: str, default=None):
        return self.store.get(self.prefix + key, default)

    def sub(self, name: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}{name}.")


def _scope(params) -> Scope:
    return params if isinstance(params, Scope) else Scope(params)


# ---------------------------------------------------------------- parameter layout

def _conv(name, cin, cout, k):
    return [(f"{name}.w", (cout, cin, k, k), cin * k * k, "kaiming"),
            (f"{name}.b", (cout,), cin * k * k, "zeros")]


def _lin(name, din, dout):
    return [(f"{name}.w", (dout, din), din, "kaiming"),
            (f"{name}.b", (dout,), din, "zeros")]


def _ru(name, c):
    return (_conv(f"{name}.re", c, c // 2, 1) + _conv(f"{name}.ex", c // 2, c, 3)
            + [(f"{name}.lambda_res", (), 1, "ones"), (f"{name}.lambda_x", (), 1, "ones")])


def _arfb(name, c):
    return (_ru(f"{name}.ru0", c) + _ru(f"{name}.ru1", c)
            + _conv(f"{name}.fuse", 2 * c, c, 1) + _conv(f"{name}.tail", c, c, 3))


def _hpb(name, cfg):
    c = cfg.channels
    hidden = c // cfg.ca_reduction
    return (_arfb(f"{name}.pre", c) + _arfb(f"{name}.shared", c) + _arfb(f"{name}.high", c)
            + _conv(f"{name}.fuse", 2 * c, c, 1)
            + _conv(f"{name}.ca.down", c, hidden, 1) + _conv(f"{name}.ca.up", hidden, c, 1)
            + _arfb(f"{name}.tail", c))


def _et(name, cfg):
    c = cfg.embed_dim
    c1 = c // 2
    return ([(f"{name}.norm1.g", (c,), c, "ones"), (f"{name}.norm1.b", (c,), c, "zeros")]
            + _lin(f"{name}.attn.reduce", c, c1) + _lin(f"{name}.attn.qkv", c1, 3 * c1)
            + _lin(f"{name}.attn.proj", c1, c1) + _lin(f"{name}.attn.expand", c1, c)
            + [(f"{name}.norm2.g", (c,), c, "ones"), (f"{name}.norm2.b", (c,), c, "zeros")]
            + _lin(f"{name}.mlp.fc1", c, cfg.mlp_ratio * c) + _lin(f"{name}.mlp.fc2", cfg.mlp_ratio * c, c))


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int, str]]:
    """``(name, shape, fan_in, init)`` for every parameter, in store order."""
    cfg.validate()
    c, r = cfg.channels, cfg.scale
    table = _conv("shallow", 3, c, 3)
    for i in range(cfg.n_hpb):
        table += _hpb(f"hpb{i}", cfg)
    table += _conv("fuse", c * cfg.n_hpb, c, 1)
    for j in range(cfg.n_et):
        table += _et(f"et{j}", cfg)
    table += _conv("rec.up", c, 3 * r * r, 3) + _conv("rec.out", 3, 3, 3) + _conv("rec.skip", c, 3 * r * r, 3)
    return table


def init_bound(fan_in: int) -> float:
    """Kaiming-uniform bound with the default layer gain: ``1 / sqrt(fan_in)``."""
    return 1.0 / math.sqrt(fan_in)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    return init_layout(param_layout(cfg), seed, dtype)


def init_layout(layout, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Materialize a parameter layout; draws happen in layout order."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, fan_in, kind in layout:
        if kind == "kaiming":
            bound = init_bound(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)
    return store


# ---------------------------------------------------------------- blocks

def _conv2d(x: Tensor, p: Scope, name: str) -> Tensor:
    return conv2d(x, p[f"{name}.w"], p[f"{name}.b"])


def hfm(t_l: Tensor, k: int = 2) -> Tensor:
    """High-frequency residual: input minus its blockwise ``k x k`` mean."""
    _, _, h, w = t_l.shape
    if h % k or w % k:
        raise ShapeError(f"HFM needs spatial dims divisible by {k}, got {h}x{w}")
    smooth = upsample_nearest(avg_pool2d(t_l, k), k)
    return sub(t_l, smooth)


def residual_unit(x: Tensor, params) -> Tensor:
    p = _scope(params)
    if x.shape[1] % 2:
        raise ConfigError("residual unit needs an even channel count")
    res = _conv2d(relu(_conv2d(x, p, "re")), p, "ex")
    return res * p["lambda_res"] + x * p["lambda_x"]


def arfb(x: Tensor, params) -> Tensor:
    p = _scope(params)
    y1 = residual_unit(x, p.sub("ru0"))
    y2 = residual_unit(y1, p.sub("ru1"))
    fused = _conv2d(concat([y1, y2], axis=1), p, "fuse")
    return _conv2d(fused, p, "tail")


def channel_attention(x: Tensor, params) -> Tensor:
    p = _scope(params)
    pooled = mean(x, axis=(2, 3), keepdims=True)
    gate = sigmoid(_conv2d(relu(_conv2d(pooled, p, "down")), p, "up"))
    return x * gate


def hpb(f_prev: Tensor, params, cfg: ModelConfig) -> Tensor:
    p = _scope(params)
    k = cfg.pool_k
    x = arfb(f_prev, p.sub("pre"))
    _, _, h, w = x.shape
    ph, pw = (-h) % k, (-w) % k
    xp = pad_reflect(x, ph, pw)
    hp, wp = h + ph, w + pw

    high = arfb(hfm(xp, k), p.sub("high"))
    main = resize_bilinear(xp, hp // k, wp // k)
    shared = p.sub("shared")
    for _ in range(cfg.hpb_shared_reps):
        main = arfb(main, shared)
    main = resize_bilinear(main, hp, wp)

    y = concat([high, main], axis=1)
    if ph or pw:
        y = y[:, :, :h, :w]
    y = _conv2d(y, p, "fuse")
    y = channel_attention(y, p.sub("ca"))
    y = arfb(y, p.sub("tail"))
    return f_prev + y


def _sdpa(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def emha_tokens(t: Tensor, params, s: int, m: int) -> Tensor:
    """Segmented multi-head attention on a ``B x N x C`` token sequence."""
    p = _scope(params)
    bsz, n, c = t.shape
    if c % 2 or (c // 2) % m:
        raise ConfigError(f"embedding {c} cannot be halved and split over {m} heads")
    c1 = c // 2
    d = c1 // m

    t = linear(t, p["reduce.w"], p["reduce.b"])
    pad = (-n) % s
    if pad:
        t = take(t, np.concatenate([np.arange(n), np.full(pad, n - 1)]), axis=1)
    n_pad = n + pad
    qkv = linear(t, p["qkv.w"], p["qkv.b"])
    qkv = transpose(reshape(qkv, (bsz, n_pad, 3, m, d)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]

    seg = n_pad // s
    outs = []
    for i in range(s):
        win = (slice(None), slice(None), slice(i * seg, (i + 1) * seg))
        outs.append(_sdpa(q[win], k[win], v[win]))
    o = outs[0] if s == 1 else concat(outs, axis=2)
    if pad:
        o = o[:, :, :n]
    o = reshape(transpose(o, (0, 2, 1, 3)), (bsz, n, c1))
    o = linear(o, p["proj.w"], p["proj.b"])
    return linear(o, p["expand.w"], p["expand.b"])


def emha(e_i: Tensor, params, s: int, m: int) -> Tensor:
    """EMHA on a ``B x C x N`` embedding, returning the same layout."""
    return transpose(emha_tokens(transpose(e_i, (0, 2, 1)), params, s, m), (0, 2, 1))


def et_tokens(t: Tensor, params, cfg: ModelConfig) -> Tensor:
    p = _scope(params)
    h = layer_norm(t, p["norm1.g"], p["norm1.b"], cfg.ln_eps)
    t = t + emha_tokens(h, p.sub("attn"), cfg.split_s, cfg.heads_m)
    h = layer_norm(t, p["norm2.g"], p["norm2.b"], cfg.ln_eps)
    h = linear(gelu(linear(h, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])
    return t + h


def et_encoder(e_i: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Pre-norm encoder block on a ``B x C x N`` embedding."""
    return transpose(et_tokens(transpose(e_i, (0, 2, 1)), params, cfg), (0, 2, 1))


def esrt_forward(i_lr: Tensor, params, cfg: ModelConfig) -> Tensor:
    p = _scope(params)
    if i_lr.ndim != 4 or i_lr.shape[1] != 3:
        raise ShapeError(f"expected B x 3 x H x W input, got {i_lr.shape}")
    _, _, h, w = i_lr.shape
    if h < 4 or w < 4:
        raise ArgError(f"input must be at least 4x4, got {h}x{w}")
    r = cfg.scale

    f0 = _conv2d(i_lr, p, "shallow")
    feats = []
    f = f0
    for i in range(cfg.n_hpb):
        f = hpb(f, p.sub(f"hpb{i}"), cfg)
        feats.append(f)
    f = _conv2d(concat(feats, axis=1), p, "fuse")

    spec = UnfoldSpec(cfg.unfold_k)
    t = transpose(unfold(f, spec), (0, 2, 1))
    for j in range(cfg.n_et):
        t = et_tokens(t, p.sub(f"et{j}"), cfg)
    f_d = fold(transpose(t, (0, 2, 1)), spec, h, w)

    body = _conv2d(pixel_shuffle(_conv2d(f_d, p, "rec.up"), r), p, "rec.out")
    skip = pixel_shuffle(_conv2d(f0, p, "rec.skip"), r)
    return body + skip


def iter_blocks(cfg: ModelConfig) -> Iterator[str]:
    """Top-level block prefixes, used for per-block accounting."""
    yield "shallow"
    for i in range(cfg.n_hpb):
        yield f"hpb{i}"
    yield "fuse"
    for j in range(cfg.n_et):
        yield f"et{j}"
    yield "rec"
