"""Binary checkpoint format.

Layout, little-endian::

    b"ESRT1"                      magic
    u32                           format version
    u32 + UTF-8 bytes             config block, one ``key=value`` per line
    u32                           tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32[ndim] dims, f32 data

Parameters are stored under their own names, Adam moments under
``adam.m.<name>`` / ``adam.v.<name>``. Scalars (step, epoch, RNG state,
hyper-parameters, model config) live in the config block.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ParamStore
from .tensor import Tensor

MAGIC = b"ESRT1"
VERSION = 1


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ParamStore
    epoch: int = 0
    optim: AdamState | None = None
    rng_state: dict | None = None
    meta: dict[str, str] = field(default_factory=dict)


def _rng_to_kv(state: dict) -> dict[str, str]:
    inner = state["state"]
    return {"rng.bit_generator": state["bit_generator"], "rng.state": str(inner["state"]),
            "rng.inc": str(inner["inc"]), "rng.has_uint32": str(state["has_uint32"]),
            "rng.uinteger": str(state["uinteger"])}


def _rng_from_kv(kv: dict[str, str]) -> dict | None:
    if "rng.state" not in kv:
        return None
    return {"bit_generator": kv["rng.bit_generator"],
            "state": {"state": int(kv["rng.state"]), "inc": int(kv["rng.inc"])},
            "has_uint32": int(kv["rng.has_uint32"]), "uinteger": int(kv["rng.uinteger"])}


def _config_block(ck: Checkpoint) -> dict[str, str]:
    kv = {f"model.{k}": repr(v) for k, v in ck.cfg.to_dict().items()}
    kv["epoch"] = str(ck.epoch)
    if ck.optim is not None:
        o = ck.optim
        kv.update({"adam.step": str(o.step), "adam.beta1": repr(o.beta1),
                   "adam.beta2": repr(o.beta2), "adam.eps": repr(o.eps)})
    if ck.rng_state is not None:
        kv.update(_rng_to_kv(ck.rng_state))
    kv.update({f"meta.{k}": str(v) for k, v in ck.meta.items()})
    for k, v in kv.items():
        if "\n" in k or "=" in k or "\n" in v:
            raise ValueError(f"config entry {k!r} cannot be serialized")
    return kv


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in ck.params.items()]
    if ck.optim is not None:
        out += [(f"adam.m.{k}", v) for k, v in ck.optim.m.items()]
        out += [(f"adam.v.{k}", v) for k, v in ck.optim.v.items()]
    return out


def dumps(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = "".join(f"{k}={v}\n" for k, v in _config_block(ck).items()).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    tensors = _tensors(ck)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    rd = _Reader(data)
    if rd.take(len(MAGIC)) != MAGIC:
        raise DataError("not an ESRT checkpoint (bad magic)")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    (n_text,) = rd.unpack("<I")
    kv = dict(line.split("=", 1) for line in rd.take(n_text).decode("utf-8").splitlines())
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = rd.unpack("<H")
        name = rd.take(n_name).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(rd.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if rd.pos != len(data):
        raise DataError("trailing bytes after checkpoint tensors")

    model_kv = {k[6:]: v for k, v in kv.items() if k.startswith("model.")}
    cfg = ModelConfig.from_dict(model_kv)
    params = ParamStore()
    optim = None
    if "adam.step" in kv:
        optim = AdamState(step=int(kv["adam.step"]), beta1=float(kv["adam.beta1"]),
                          beta2=float(kv["adam.beta2"]), eps=float(kv["adam.eps"]))
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            optim.m[name[7:]] = arr
        elif name.startswith("adam.v."):
            optim.v[name[7:]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True, name=name)
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    return Checkpoint(cfg, params, int(kv.get("epoch", 0)), optim, _rng_from_kv(kv), meta)


def save(ck: Checkpoint, path) -> Path:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ck))
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
