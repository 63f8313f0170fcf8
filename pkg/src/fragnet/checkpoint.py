"""Single-file checkpoints: a text header followed by little-endian float32 payload.

Header lines (UTF-8, ``\\n`` terminated)::

    FRAGNET-CHECKPOINT
    format_version 1
    config.<key> <value>          one per NetworkConfig field
    meta.<key> <value>            epoch, step, seed
    adam.<key> <value>            t, beta1, beta2, eps
    tensors <count>
    tensor <name> <d0,d1,...> <byte offset> <element count>
    end

Tensor names are parameter paths; Adam moments are stored as
``adam.m/<param>`` and ``adam.v/<param>``. Offsets are relative to the first
payload byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, NetworkConfig
from .nn import ParameterSet, is_running_stat
from .optim import AdamState
from .tensor import Tensor, get_dtype

MAGIC = "FRAGNET-CHECKPOINT"
FORMAT_VERSION = 1
_LE32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: ParameterSet
    state: AdamState | None
    epoch: int = -1
    step: int = 0
    seed: int = 0


def _shape_str(shape: tuple[int, ...]) -> str:
    return ",".join(map(str, shape)) if shape else "scalar"


def _parse_shape(s: str) -> tuple[int, ...]:
    return () if s == "scalar" else tuple(int(v) for v in s.split(","))


def encode(ckpt: Checkpoint) -> bytes:
    entries: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in ckpt.params.items()]
    if ckpt.state is not None:
        for n, _ in ckpt.params.trainable():
            if n in ckpt.state.m:
                entries.append((f"adam.m/{n}", ckpt.state.m[n]))
                entries.append((f"adam.v/{n}", ckpt.state.v[n]))
    head = [MAGIC, f"format_version {FORMAT_VERSION}"]
    head += [f"config.{k} {v}" for k, v in ckpt.config.to_dict().items()]
    head += [f"meta.epoch {ckpt.epoch}", f"meta.step {ckpt.step}", f"meta.seed {ckpt.seed}"]
    if ckpt.state is not None:
        s = ckpt.state
        head += [f"adam.t {s.t}", f"adam.beta1 {s.beta1!r}", f"adam.beta2 {s.beta2!r}", f"adam.eps {s.eps!r}"]
    head.append(f"tensors {len(entries)}")
    payload = []
    offset = 0
    for name, arr in entries:
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        buf = np.ascontiguousarray(arr, dtype=_LE32).tobytes()
        head.append(f"tensor {name} {_shape_str(arr.shape)} {offset} {arr.size}")
        payload.append(buf)
        offset += len(buf)
    head.append("end")
    return ("\n".join(head) + "\n").encode("utf-8") + b"".join(payload)


def decode(blob: bytes, source: str = "<checkpoint>") -> Checkpoint:
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{source}: truncated header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        lines.append(line)
        if line == "end":
            break
        if len(lines) == 1 and line != MAGIC:
            raise CheckpointError(f"{source}: not a FragNet checkpoint")
    payload = memoryview(blob)[pos:]
    kv: dict[str, str] = {}
    tensors = []
    for line in lines[1:-1]:
        key, _, rest = line.partition(" ")
        if key == "tensor":
            name, shape, off, count = rest.split(" ")
            tensors.append((name, _parse_shape(shape), int(off), int(count)))
        else:
            kv[key] = rest
    version = int(kv.get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    if int(kv.get("tensors", "-1")) != len(tensors):
        raise CheckpointError(f"{source}: tensor directory is incomplete")
    config = NetworkConfig.from_dict({k[7:]: v for k, v in kv.items() if k.startswith("config.")})
    dtype = get_dtype()
    params = ParameterSet()
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, shape, off, count in tensors:
        end = off + 4 * count
        if end > len(payload) or int(np.prod(shape, dtype=np.int64)) != count:
            raise CheckpointError(f"{source}: tensor {name} is truncated or mis-shaped")
        arr = np.frombuffer(payload[off:end], dtype=_LE32).reshape(shape).astype(dtype)
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params.add(name, Tensor(arr, requires_grad=not is_running_stat(name), _copy=False))
    state = None
    if "adam.t" in kv:
        state = AdamState(beta1=float(kv["adam.beta1"]), beta2=float(kv["adam.beta2"]),
                          eps=float(kv["adam.eps"]), t=int(kv["adam.t"]), m=m, v=v)
    return Checkpoint(config, params, state, int(kv.get("meta.epoch", -1)),
                      int(kv.get("meta.step", 0)), int(kv.get("meta.seed", 0)))


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect: NetworkConfig | None = None) -> Checkpoint:
    path = Path(path)
    ckpt = decode(path.read_bytes(), str(path))
    if expect is not None and expect != ckpt.config:
        raise ConfigError(f"{path}: checkpoint is for {ckpt.config.label} "
                          f"(M={ckpt.config.writer_count}), expected {expect.label} (M={expect.writer_count})")
    return ckpt
