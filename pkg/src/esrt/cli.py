"""``esrt`` command line: train, infer, eval, cost and gradcheck.

Exit codes: 0 success, 1 a check failed, 2 usage or environment error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import cost
from . import data as D
from . import gradcheck
from . import model as M
from . import train as T
from .errors import EsrtError
from .infer import DEFAULT_TILE, upscale

log = logging.getLogger("esrt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

MODEL_KEYS = {f.name: f.type for f in fields(M.ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in fields(T.TrainConfig)}
PATH_KEYS = ("data", "out", "resume", "val")


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    kind = MODEL_KEYS.get(key) or TRAIN_KEYS.get(key)
    if kind is None or value is None:
        return value
    kind = str(kind)
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if str(value).lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(value)
            return str(value).lower() in ("1", "true", "yes")
        return float(value) if kind == "float" else int(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def merge_config(args: argparse.Namespace, allowed) -> dict:
    """Defaults < config file < flags, restricted to ``allowed`` keys."""
    merged = {}
    if getattr(args, "config", None):
        from_file = read_config_file(args.config)
        unknown = sorted(set(from_file) - set(allowed))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged.update({k: _coerce(k, v) for k, v in from_file.items()})
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = _coerce(key, value)
    return merged


def _split(merged: dict) -> tuple[M.ModelConfig, T.TrainConfig]:
    cfg = M.ModelConfig.from_dict({k: v for k, v in merged.items() if k in MODEL_KEYS})
    tcfg = T.TrainConfig(**{k: v for k, v in merged.items() if k in TRAIN_KEYS})
    return cfg, tcfg


def _add_model_flags(p: argparse.ArgumentParser, skip=()) -> None:
    g = p.add_argument_group("model")
    for key, kind in MODEL_KEYS.items():
        if key in skip:
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float if str(kind) == "float" else int)


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    merged = merge_config(args, list(MODEL_KEYS) + list(TRAIN_KEYS) + list(PATH_KEYS))
    for key in ("data", "out"):
        if not merged.get(key):
            raise UsageError(f"--{key} is required (flag or config file)")
    cfg, tcfg = _split(merged)
    log.info("effective config: %s", json.dumps({**cfg.to_dict(), **tcfg.__dict__,
                                                 **{k: str(merged.get(k)) for k in PATH_KEYS}}))
    pairs = D.load_dataset(merged["data"], cfg.scale)
    val = D.load_dataset(merged["val"], cfg.scale) if merged.get("val") else None
    resume = ckpt.load(merged["resume"]) if merged.get("resume") else None
    result = T.train(cfg, pairs, merged["out"], tcfg, val=val, resume=resume)
    for row in result.history:
        print(f"epoch {row['epoch']}: loss {row['loss']:.6f} val_psnr {row['val_psnr']:.3f} lr {row['lr']:.3g}")
    if result.paths:
        print(f"final checkpoint: {result.paths[-1]}")
    return EXIT_OK


def check_params(ck: ckpt.Checkpoint) -> None:
    expected = {name: shape for name, shape, _, _ in M.param_layout(ck.cfg)}
    got = {name: t.shape for name, t in ck.params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        bad = sorted(k for k in set(expected) & set(got) if expected[k] != got[k])
        raise UsageError(f"checkpoint does not match its config (missing {missing[:3]}, "
                         f"unexpected {extra[:3]}, wrong shape {bad[:3]})")


def cmd_infer(args) -> int:
    ck = ckpt.load(args.checkpoint)
    check_params(ck)
    img = D.load_image(args.input)
    t0 = time.perf_counter()
    sr = upscale(img, ck.params, ck.cfg, tile=args.tile or None)
    elapsed = time.perf_counter() - t0
    D.save_image(sr, args.output)
    h, w = img.shape[:2]
    print(f"{args.input}: {h}x{w} -> {sr.shape[0]}x{sr.shape[1]} (x{ck.cfg.scale}) in {elapsed:.3f}s")
    return EXIT_OK


def _fmt(v: float):
    return "inf" if math.isinf(v) else v


def cmd_eval(args) -> int:
    if args.checkpoint:
        ck = ckpt.load(args.checkpoint)
        check_params(ck)
        if args.scale and args.scale != ck.cfg.scale:
            raise UsageError(f"--scale {args.scale} conflicts with checkpoint scale {ck.cfg.scale}")
        scale, method = ck.cfg.scale, "checkpoint"
        tile = args.tile or None

        def predict(pair):
            return upscale(pair.lr, ck.params, ck.cfg, tile=tile)
    else:
        if not args.scale:
            raise UsageError("--scale is required without --checkpoint")
        scale, method = args.scale, args.method
        predict = {"bicubic": D.bicubic_predict, "identity": D.identity_predict}[method]
    shave = scale if args.shave is None else args.shave
    pairs = D.load_dataset(args.dataset, scale)
    scores = D.evaluate(pairs, predict, shave)
    mean_psnr = float(np.mean([s.psnr for s in scores]))
    mean_ssim = float(np.mean([s.ssim for s in scores]))
    report = {"dataset": str(args.dataset), "scale": scale, "method": method, "shave": shave,
              "images": [{"name": s.name, "psnr": _fmt(s.psnr), "ssim": s.ssim} for s in scores],
              "mean": {"psnr": _fmt(mean_psnr), "ssim": mean_ssim}}
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for s in scores:
            print(f"{s.name:<24} PSNR {s.psnr:8.4f} dB  SSIM {s.ssim:.4f}")
        print(f"{'mean':<24} PSNR {mean_psnr:8.4f} dB  SSIM {mean_ssim:.4f}")
    return EXIT_OK


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def cmd_cost(args) -> int:
    merged = merge_config(args, list(MODEL_KEYS))
    if args.split is not None:
        merged["split_s"] = args.split
    cfg = M.ModelConfig.from_dict(merged)
    h, w = args.input_size
    report = cost.cost_report(cfg, h, w, splits=tuple(args.sweep))
    print(report.to_json() if args.json else report.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    blocks = gradcheck.BLOCKS if args.block == "all" else (args.block,)
    failed = []
    for block in blocks:
        res = gradcheck.check_block(block, seed=args.seed)
        name, worst = res.worst
        status = "ok" if res.passed else "FAIL"
        print(f"{block:<6} max rel err {worst:.3e} ({name}) tol {res.tol:g} {status}")
        if not res.passed:
            bad = [k for k, v in res.errors.items() if not v < res.tol]
            print(f"  offending parameters: {', '.join(bad)}")
            failed.append(block)
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="esrt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at debug level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an image folder")
    p.add_argument("--data", help="dataset root (HR/ and optional LR_x{r}/)")
    p.add_argument("--out", help="output directory for checkpoints and metrics.csv")
    p.add_argument("--val", help="optional validation dataset root")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--config", help="key=value config file; flags override it")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--patch", type=int, help="LR patch size")
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-every", dest="decay_every", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=int, default=DEFAULT_TILE, help="LR tile size, 0 for whole image")
    p.set_defaults(func=cmd_infer, parser=p)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", type=int, choices=(2, 3, 4))
    src = p.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--method", choices=("bicubic", "identity"), default="bicubic")
    p.add_argument("--shave", type=int, help="border pixels ignored (default: scale)")
    p.add_argument("--tile", type=int, default=DEFAULT_TILE)
    p.add_argument("--json", action="store_true", help="print a JSON report")
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("cost", help="parameter, FLOP and attention-memory report")
    p.add_argument("--input-size", dest="input_size", type=parse_size, default=(180, 320),
                   help="LR input size HxW")
    p.add_argument("--split", type=int, help="FSM split factor s")
    p.add_argument("--sweep", type=int, nargs="+", default=[1, 2, 4, 6], help="s values to list")
    p.add_argument("--config", help="key=value model config file")
    p.add_argument("--json", action="store_true")
    _add_model_flags(p, skip=("split_s",))
    p.set_defaults(func=cmd_cost, parser=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--block", choices=("all",) + gradcheck.BLOCKS, default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck, parser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, EsrtError) as exc:
        if isinstance(exc, UsageError):
            args.parser.print_usage(sys.stderr)
        print(f"esrt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
