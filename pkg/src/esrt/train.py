"""L1 training with Adam, step-decayed learning rate and per-epoch checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import model as M
from .errors import DataError, ShapeError
from .infer import upscale
from .tensor import GradTape, Tensor, abs_, backward, mean, sub

log = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "loss", "val_psnr", "lr")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at a tie is 0."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return mean(abs_(sub(pred, target)))


def adam_step(params: M.ParamStore, grads: dict, state: ckpt.AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else g
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def lr_at(epoch: int, base: float = 2e-4, every: int = 200) -> float:
    """Learning rate for a 0-based epoch index: halved every ``every`` epochs."""
    return base * 0.5 ** (epoch // every)


@dataclass
class TrainConfig:
    epochs: int = 1
    steps_per_epoch: int = 1000
    batch: int = 16
    patch: int = 48
    lr: float = 2e-4
    decay_every: int = 200
    seed: int = 0
    augment: bool = True
    val_crop: int = 64
    val_images: int = 5


@dataclass
class TrainResult:
    checkpoint: ckpt.Checkpoint
    history: list[dict]
    step_losses: list[float]
    paths: list[Path]


def validation_pairs(pairs: Sequence[D.SrPair], crop: int, limit: int) -> list[D.SrPair]:
    """Centre LR crops of the first ``limit`` pairs, to bound validation cost."""
    out = []
    for p in list(pairs)[:limit]:
        h, w = p.lr.shape[:2]
        c = min(crop, h, w)
        y, x = (h - c) // 2, (w - c) // 2
        lr, hr = D.crop_pair(p, y, x, c)
        out.append(D.SrPair(hr, lr, p.scale, p.name))
    return out


def val_psnr(pairs: Sequence[D.SrPair], params, cfg: M.ModelConfig) -> float:
    if not pairs:
        return math.nan
    scores = [D.psnr_y(D.quantize(upscale(p.lr, params, cfg)), p.hr, cfg.scale) for p in pairs]
    return float(np.mean(scores))


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.esrt"


def train(cfg: M.ModelConfig, pairs: Sequence[D.SrPair], out_dir, tcfg: TrainConfig,
          val: Sequence[D.SrPair] | None = None, resume: ckpt.Checkpoint | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train for ``tcfg.epochs`` epochs of ``tcfg.steps_per_epoch`` batches.

    A checkpoint is written after every epoch and a CSV row appended to
    ``metrics.csv``. With ``resume`` training continues from that
    checkpoint's parameters, optimizer moments, RNG state and epoch.
    """
    cfg.validate()
    if not pairs:
        raise DataError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if val is None:
        val = validation_pairs(pairs, tcfg.val_crop, tcfg.val_images)

    rng = np.random.default_rng(tcfg.seed)
    if resume is not None:
        if resume.cfg != cfg:
            raise DataError("checkpoint model config differs from the requested one")
        params = resume.params.astype(np.float32)
        state = resume.optim or ckpt.AdamState()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        params = M.init_params(cfg, tcfg.seed, np.float32)
        state = ckpt.AdamState()
        start = 0
    params.trainable(True)

    metrics = out_dir / "metrics.csv"
    if start == 0 or not metrics.exists():
        with metrics.open("w", newline="") as f:
            csv.writer(f).writerow(CSV_HEADER)

    meta = {k: str(v) for k, v in asdict(tcfg).items()}
    history, step_losses, paths = [], [], []
    current = resume
    for epoch in range(start, tcfg.epochs):
        lr = lr_at(epoch, tcfg.lr, tcfg.decay_every)
        losses = []
        for _ in range(tcfg.steps_per_epoch):
            lr_b, hr_b = D.sample_patches(pairs, tcfg.patch, tcfg.batch, rng, tcfg.augment)
            with GradTape() as tape:
                loss = l1_loss(M.esrt_forward(Tensor(lr_b), params, cfg), Tensor(hr_b))
            grads = backward(loss, tape)
            adam_step(params, grads, state, lr)
            value = float(loss.data)
            losses.append(value)
            step_losses.append(value)
            if on_step is not None:
                on_step(state.step, value)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)),
               "val_psnr": val_psnr(val, params, cfg), "lr": lr}
        history.append(row)
        with metrics.open("a", newline="") as f:
            csv.writer(f).writerow([row[k] for k in CSV_HEADER])
        log.info("epoch %d loss %.6f val_psnr %.3f lr %.3g", row["epoch"], row["loss"], row["val_psnr"], lr)
        current = ckpt.Checkpoint(cfg, params, epoch + 1, state, rng.bit_generator.state, meta)
        paths.append(ckpt.save(current, out_dir / checkpoint_name(epoch + 1)))
    if current is None:
        current = ckpt.Checkpoint(cfg, params, start, state, rng.bit_generator.state, meta)
    return TrainResult(current, history, step_losses, paths)
