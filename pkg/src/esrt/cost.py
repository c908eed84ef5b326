"""Closed-form parameter, FLOP and attention-score accounting.

FLOPs count one multiply-accumulate as 2 FLOPs. Convolutions and linear
layers omit their bias adds; elementwise, norm and softmax work is counted at
leading order with the per-element constants below.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from . import model as M

FLOP_CONVENTION = "1 MAC = 2 FLOPs"
BYTES_PER_ELEM = 4

# per-element costs of the non-matmul ops
_RU_MIX = 3        # lambda_res * a + lambda_x * b
_BILINEAR = 8      # 4 taps, separable weights folded in
_LAYER_NORM = 8
_SOFTMAX = 4
_GELU = 8


def count_params(store) -> int:
    return int(sum(t.size for t in store.values()))


def params_by_block(store, cfg: M.ModelConfig) -> dict[str, int]:
    out = {}
    for block in M.iter_blocks(cfg):
        out[block] = sum(t.size for name, t in store.items()
                         if name == block or name.startswith(block + "."))
    return out


def layout_params(cfg: M.ModelConfig) -> int:
    return sum(math.prod(shape) for _, shape, _, _ in M.param_layout(cfg))


def attn_score_memory(n: int, m: int, s: int, b: int = 1) -> int:
    """Attention-score elements for ``s`` segments: ``b * m * n^2 / s``."""
    if n % s:
        raise ValueError(f"sequence length {n} is not a multiple of {s}; pad first")
    seg = n // s
    return b * m * s * seg * seg


def conv_flops(cin: int, cout: int, k: int, h: int, w: int) -> int:
    return 2 * k * k * cin * cout * h * w


def _arfb_flops(c: int, h: int, w: int) -> int:
    hw = h * w
    ru = conv_flops(c, c // 2, 1, h, w) + conv_flops(c // 2, c, 3, h, w) + _RU_MIX * c * hw + c // 2 * hw
    return 2 * ru + conv_flops(2 * c, c, 1, h, w) + conv_flops(c, c, 3, h, w)


def _hpb_flops(cfg: M.ModelConfig, h: int, w: int) -> int:
    c, k = cfg.channels, cfg.pool_k
    hp, wp = h + (-h) % k, w + (-w) % k
    hs, ws = hp // k, wp // k
    total = 2 * _arfb_flops(c, h, w)                         # pre + tail
    total += _arfb_flops(c, hp, wp)                          # high-frequency branch
    total += cfg.hpb_shared_reps * _arfb_flops(c, hs, ws)    # shared, downsampled
    total += 2 * c * hp * wp                                 # pool + subtract
    total += _BILINEAR * c * (hs * ws + hp * wp)
    total += conv_flops(2 * c, c, 1, h, w)
    hidden = c // cfg.ca_reduction
    total += c * h * w + 4 * c * hidden + 2 * c * h * w      # pool, squeeze mlp, gate
    total += c * h * w                                       # global residual
    return total


def _et_flops(cfg: M.ModelConfig, n: int) -> tuple[int, int]:
    """``(dense, attention)`` FLOPs of one encoder block on ``n`` tokens."""
    c = cfg.embed_dim
    c1 = c // 2
    s = cfg.split_s
    n_pad = n + (-n) % s
    hidden = cfg.mlp_ratio * c
    dense = 2 * n * c * c1 + 2 * n_pad * c1 * 3 * c1 + 2 * n * c1 * c1 + 2 * n * c1 * c
    dense += 2 * n * c * hidden * 2 + _GELU * n * hidden
    dense += 2 * _LAYER_NORM * n * c + 2 * n * c
    scores = attn_score_memory(n_pad, cfg.heads_m, s)
    d = c1 // cfg.heads_m
    attention = 2 * scores * d * 2 + _SOFTMAX * scores + scores
    return dense, attention


def flops_by_block(cfg: M.ModelConfig, in_h: int, in_w: int) -> dict[str, int]:
    c, r = cfg.channels, cfg.scale
    h, w = in_h, in_w
    out = {"shallow": conv_flops(3, c, 3, h, w)}
    for i in range(cfg.n_hpb):
        out[f"hpb{i}"] = _hpb_flops(cfg, h, w)
    out["fuse"] = conv_flops(c * cfg.n_hpb, c, 1, h, w)
    n = h * w
    for j in range(cfg.n_et):
        dense, attention = _et_flops(cfg, n)
        out[f"et{j}"] = dense
        out[f"et{j}.attention"] = attention
    out["rec"] = (conv_flops(c, 3 * r * r, 3, h, w) * 2 + conv_flops(3, 3, 3, r * h, r * w)
                  + 3 * r * h * r * w)
    return out


def count_flops(cfg: M.ModelConfig, in_h: int, in_w: int) -> int:
    return sum(flops_by_block(cfg, in_h, in_w).values())


@dataclass
class CostReport:
    scale: int
    input_hw: tuple[int, int]
    params_total: int
    params_by_block: dict[str, int]
    params_output_proj: int
    params_mlp: int
    flops_total: int
    flops_by_block: dict[str, int]
    flops_hr_reading: int
    attn_score_elems: int
    attn_score_bytes: int
    split: int
    attn_by_split: dict[int, int] = field(default_factory=dict)
    flop_convention: str = FLOP_CONVENTION

    def to_json(self) -> str:
        d = asdict(self)
        d["attn_by_split"] = {str(k): v for k, v in self.attn_by_split.items()}
        return json.dumps(d, indent=2)

    def table(self) -> str:
        h, w = self.input_hw
        lines = [f"# FLOPs convention: {self.flop_convention}",
                 f"scale x{self.scale}, LR input {h}x{w}",
                 f"{'block':<16}{'params':>12}{'GFLOPs':>14}"]
        for name, flops in self.flops_by_block.items():
            p = self.params_by_block.get(name, "")
            lines.append(f"{name:<16}{p!s:>12}{flops / 1e9:>14.3f}")
        lines += [f"{'total':<16}{self.params_total:>12}{self.flops_total / 1e9:>14.3f}",
                  f"output projection params: {self.params_output_proj}",
                  f"MLP params: {self.params_mlp}",
                  f"GFLOPs if {h}x{w} is the HR output size: {self.flops_hr_reading / 1e9:.3f}",
                  "attention-score elements by split s (bytes at 4 B/elem):"]
        for s, e in self.attn_by_split.items():
            mark = " *" if s == self.split else ""
            lines.append(f"  s={s:<3}{e:>20}{e * BYTES_PER_ELEM:>22}{mark}")
        return "\n".join(lines)


def cost_report(cfg: M.ModelConfig, in_h: int, in_w: int,
                splits: tuple[int, ...] = (1, 2, 4, 6), store=None) -> CostReport:
    """Build a report for an LR input of ``in_h x in_w``."""
    cfg.validate()
    store = store if store is not None else M.init_params(cfg)
    c1 = cfg.embed_dim // 2
    c = cfg.embed_dim
    n = in_h * in_w

    def padded(s):
        return n + (-n) % s

    hr_h, hr_w = max(in_h // cfg.scale, 1), max(in_w // cfg.scale, 1)
    sel = cfg.split_s
    return CostReport(
        scale=cfg.scale,
        input_hw=(in_h, in_w),
        params_total=count_params(store),
        params_by_block=params_by_block(store, cfg),
        params_output_proj=cfg.n_et * (c1 * c1 + c1),
        params_mlp=cfg.n_et * (2 * c * cfg.mlp_ratio * c + cfg.mlp_ratio * c + c),
        flops_total=count_flops(cfg, in_h, in_w),
        flops_by_block=flops_by_block(cfg, in_h, in_w),
        flops_hr_reading=count_flops(cfg, hr_h, hr_w),
        attn_score_elems=cfg.n_et * attn_score_memory(padded(sel), cfg.heads_m, sel),
        attn_score_bytes=cfg.n_et * attn_score_memory(padded(sel), cfg.heads_m, sel) * BYTES_PER_ELEM,
        split=sel,
        attn_by_split={s: cfg.n_et * attn_score_memory(padded(s), cfg.heads_m, s)
                       for s in sorted(set(splits) | {sel})},
    )
