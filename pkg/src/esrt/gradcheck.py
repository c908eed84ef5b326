"""Central finite-difference checks of the tape's gradients, in float64.

The error reported for a tensor is ``max |analytic - numeric|`` over the
probed entries divided by the largest analytic gradient magnitude of that
tensor, so entries whose true gradient is near zero do not blow up the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as M
from .tensor import GradTape, Tensor, backward, mul, relu_masks, sum_

BLOCKS = ("hfm", "arfb", "hpb", "emha", "et", "model")
BLOCK_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    block: str
    errors: dict[str, float]
    tol: float

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=lambda k: np.inf if np.isnan(self.errors[k]) else self.errors[k])
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        values = list(self.errors.values())
        return bool(values) and all(v < self.tol for v in values)


def fd_check(loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor], *,
             h: float = 1e-3, max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``leaves`` are perturbed in place and restored. With ``max_entries`` set,
    only that many randomly chosen entries per tensor are probed. ReLU masks
    are frozen at the base point while probing, so a +/-h step that would
    cross a kink measures the same linear piece the tape differentiates.
    """
    rng = np.random.default_rng(seed)
    with GradTape() as tape, relu_masks() as masks:
        loss = loss_fn()
    grads = backward(loss, tape)

    def value() -> float:
        with relu_masks(replay=masks):
            return float(loss_fn().data)

    errors = {}
    for name, t in leaves.items():
        analytic = grads[name].data.reshape(-1)
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError(f"leaf {name} is not contiguous")
        if max_entries is None or flat.size <= max_entries:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        denom = max(float(np.abs(analytic).max()), 1e-8)
        errors[name] = float(np.abs(analytic[idx] - numeric).max() / denom)
    return errors


def _leaf(rng, shape, name):
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name)


def _projected(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: sum_(mul(y, weights))


def _perturb_lambdas(store: M.ParamStore, rng) -> None:
    for name, t in store.items():
        if name.endswith(("lambda_res", "lambda_x")):
            t.data[...] = rng.uniform(0.5, 1.5)


def check_block(block: str, seed: int = 0, cfg: M.ModelConfig | None = None,
                max_entries: int = 4) -> CheckResult:
    """Run the finite-difference check for one named block."""
    cfg = cfg or M.ModelConfig()
    rng = np.random.default_rng(seed)
    c = cfg.channels
    tol = BLOCK_TOL

    if block == "hfm":
        x = _leaf(rng, (1, 4, 8, 8), "x")
        store = M.ParamStore()
        fn = lambda: M.hfm(x, cfg.pool_k)
    elif block == "arfb":
        x = _leaf(rng, (1, c, 8, 8), "x")
        store = M.init_layout(M._arfb("b", c), seed, np.float64)
        _perturb_lambdas(store, rng)
        fn = lambda: M.arfb(x, store.scope("b."))
    elif block == "hpb":
        x = _leaf(rng, (1, c, 8, 8), "x")
        store = M.init_layout(M._hpb("b", cfg), seed, np.float64)
        _perturb_lambdas(store, rng)
        fn = lambda: M.hpb(x, store.scope("b."), cfg)
    elif block == "emha":
        x = _leaf(rng, (1, cfg.embed_dim, 16), "x")
        layout = [row for row in M._et("b", cfg) if ".attn." in row[0]]
        store = M.init_layout(layout, seed, np.float64)
        fn = lambda: M.emha(x, store.scope("b.attn."), cfg.split_s, cfg.heads_m)
    elif block == "et":
        x = _leaf(rng, (1, cfg.embed_dim, 16), "x")
        store = M.init_layout(M._et("b", cfg), seed, np.float64)
        fn = lambda: M.et_encoder(x, store.scope("b."), cfg)
    elif block == "model":
        x = _leaf(rng, (1, 3, 8, 8), "x")
        x.data[...] = rng.uniform(0, 1, x.shape)
        store = M.init_params(cfg, seed, np.float64)
        _perturb_lambdas(store, rng)
        errors = fd_check(lambda: sum_(M.esrt_forward(x, store, cfg)), {"x": x, **store},
                          max_entries=max_entries, seed=seed)
        return CheckResult(block, errors, MODEL_TOL)
    else:
        raise ValueError(f"unknown block {block!r}; choose from {BLOCKS}")

    project = _projected(fn(), rng)
    errors = fd_check(lambda: project(fn()), {"x": x, **store}, max_entries=max_entries, seed=seed)
    return CheckResult(block, errors, tol)


def run_suite(blocks=BLOCKS, seed: int = 0, cfg: M.ModelConfig | None = None) -> list[CheckResult]:
    return [check_block(b, seed, cfg) for b in blocks]
