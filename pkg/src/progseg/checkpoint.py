"""Binary checkpoint format.

Layout (all integers little-endian, no padding)::

    b"PSEG"                magic
    u16                    format version
    u32 + bytes            metadata, UTF-8 JSON with sorted keys
    u32                    tensor count
    per tensor:
        u16 + bytes        name, UTF-8
        u8                 ndim
        u32 * ndim         shape
        f32 * prod(shape)  data, row-major
    u32                    CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import Config
from .errors import CheckpointError
from .nn import AdamState
from .progan import GrowthState
from .train import BatchProvider, TrainState, architecture_for_mode, init_state

MAGIC = b"PSEG"
VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    tensors: "OrderedDict[str, np.ndarray]"


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointError("bad magic (not a progseg checkpoint)", 0)
    if len(data) < 10:
        raise CheckpointError("truncated header", len(data))
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch (file corrupt or truncated)", len(data) - 4)
    r = _Reader(data[:-4])
    r.pos = 4
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version} (expected {VERSION})", 4)
    (mlen,) = r.unpack("<I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError("metadata is not valid JSON", start) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", f"shape of {name}")
        n = int(np.prod(shape)) if ndim else 1
        raw = r.take(4 * n, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError("unexpected bytes after tensor table", r.pos)
    return Checkpoint(meta, tensors)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temporary file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(encode(ckpt))
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write {path}: {e}") from None


def load(path, expected_digest: str | None = None) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from None
    ckpt = decode(data)
    if expected_digest is not None and ckpt.meta.get("config_digest") != expected_digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {ckpt.meta.get('config_digest', '?')[:12]}, "
            f"expected {expected_digest[:12]}")
    return ckpt


# -- training state <-> checkpoint -------------------------------------------------

def _opt_tensors(prefix: str, opt: AdamState, out: OrderedDict) -> None:
    for name in opt.m:
        out[f"{prefix}.m.{name}"] = opt.m[name]
        out[f"{prefix}.v.{name}"] = opt.v[name]


def from_state(state: TrainState, config: Config, mode: str,
               provider: BatchProvider | None = None) -> Checkpoint:
    g, d = state.models.generator, state.models.discriminator
    tensors = OrderedDict()
    for name, arr in g.state_dict().items():
        tensors[f"G.{name}"] = arr
    if d is not None:
        for name, arr in d.state_dict().items():
            tensors[f"D.{name}"] = arr
    _opt_tensors("optG", state.opt_g, tensors)
    if state.opt_d is not None:
        _opt_tensors("optD", state.opt_d, tensors)
    rngs = {"G.init": g.init_rng.get_state(), "G.noise": g.noise.get_state()}
    if d is not None:
        rngs["D.init"] = d.init_rng.get_state()
    meta = {
        "config": config.run_dict(),
        "config_digest": config.digest(),
        "mode": mode,
        "growth_state": state.gs.as_dict(),
        "iteration": state.iteration,
        "opt_steps": {"G": state.opt_g.step,
                      "D": state.opt_d.step if state.opt_d is not None else None},
        "opt_counts": {"G": dict(state.opt_g.t),
                       "D": dict(state.opt_d.t) if state.opt_d is not None else None},
        "rng": rngs,
        "batches": provider.get_state() if provider is not None else None,
    }
    return Checkpoint(meta, tensors)


def _restore_opt(prefix: str, opt: AdamState, step: int, counts: dict, tensors: dict) -> None:
    opt.step = int(step)
    for key, arr in tensors.items():
        if key.startswith(prefix + ".m."):
            opt.m[key[len(prefix) + 3:]] = arr.copy()
        elif key.startswith(prefix + ".v."):
            opt.v[key[len(prefix) + 3:]] = arr.copy()
    for name in opt.m:
        opt.t[name] = int(counts[name])


def to_state(ckpt: Checkpoint):
    """Rebuild (Config, TrainState, batch-provider state or None) from a checkpoint."""
    meta = ckpt.meta
    try:
        config = Config.from_dict(meta["config"])
        mode = meta["mode"]
        gs_d = meta["growth_state"]
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"metadata missing field {e}") from None
    cfg = config.train_config(mode)
    arch = architecture_for_mode(config.architecture(), mode, config.schedule())
    state = init_state(arch, cfg)
    g, d = state.models.generator, state.models.discriminator
    while g.n_stages < gs_d["stage"]:
        g.grow()
        if d is not None:
            d.grow()
    t = ckpt.tensors
    try:
        g.load_state_dict({k[2:]: v for k, v in t.items() if k.startswith("G.")})
        if d is not None:
            d.load_state_dict({k[2:]: v for k, v in t.items() if k.startswith("D.")})
    except Exception as e:  # shape or name mismatch means the file does not match its config
        raise CheckpointError(f"tensor table does not match the architecture: {e}") from None
    try:
        _restore_opt("optG", state.opt_g, meta["opt_steps"]["G"], meta["opt_counts"]["G"], t)
        if state.opt_d is not None:
            _restore_opt("optD", state.opt_d, meta["opt_steps"]["D"], meta["opt_counts"]["D"], t)
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"optimizer state incomplete: missing {e}") from None
    rngs = meta.get("rng", {})
    g.init_rng.set_state(rngs["G.init"])
    g.noise.set_state(rngs["G.noise"])
    if d is not None:
        d.init_rng.set_state(rngs["D.init"])
    state.models.state = GrowthState(int(gs_d["stage"]), int(gs_d["resolution"]),
                                     float(gs_d["alpha"]), int(gs_d["iters_in_stage"]))
    state.iteration = int(meta["iteration"])
    return config, state, meta.get("batches")


def save_checkpoint(state: TrainState, config: Config, mode: str, path,
                    provider: BatchProvider | None = None) -> None:
    save(from_state(state, config, mode, provider), path)


def load_checkpoint(path, expected_digest: str | None = None):
    return to_state(load(path, expected_digest))


def restore_provider(provider: BatchProvider, batches_state) -> None:
    if batches_state is not None:
        provider.set_state(batches_state)

