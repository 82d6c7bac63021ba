"""Versioned binary checkpoint container.

Layout (all integers little-endian unsigned 64-bit):

    magic   7 bytes  b"C2FCKPT"
    version u64
    digest  32 bytes  SHA-256 of the canonical config JSON
    count   u64
    entry*  name_len u64, name bytes (UTF-8), rank u64, dims u64 * rank,
            raw little-endian float32 data

Entries are written sorted by name, so identical parameters produce identical
bytes.  Teacher/EMA bookkeeping rides along under the reserved ``__ema__.``
prefix; scalar fields are stored as single-element arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"C2FCKPT"
FORMAT_VERSION = 1
_EMA_PREFIX = "__ema__."


class CheckpointError(Exception):
    """Unreadable or inconsistent checkpoint file."""


def config_digest(config) -> bytes:
    """SHA-256 over the canonical (sorted, compact) JSON of a config mapping."""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).digest()


@dataclass
class LoadedEMA:
    alpha: float
    step: int
    teacher: dict[str, np.ndarray]


@dataclass
class LoadedCheckpoint:
    entries: dict[str, np.ndarray]
    digest: bytes
    version: int
    ema: LoadedEMA | None = None


def _write_entry(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<Q", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(data.tobytes())


def save_checkpoint(params, config, path, ema_state=None) -> None:
    """Write a parameter set (and optionally the teacher EMA state) to disk.

    ``params`` maps names to float32 arrays; ``config`` is hashed into the
    header for provenance.  Loading the file back reproduces every array bit
    for bit.
    """
    for name in params:
        if name.startswith(_EMA_PREFIX):
            raise ValueError(f"parameter name {name!r} uses the reserved EMA prefix")
    entries = dict(params)
    if ema_state is not None:
        entries[_EMA_PREFIX + "alpha"] = np.asarray([ema_state.alpha], dtype=np.float32)
        entries[_EMA_PREFIX + "step"] = np.asarray([ema_state.step], dtype=np.float32)
        for name, tensor in ema_state.teacher.items():
            arr = tensor.detach().cpu().numpy() if hasattr(tensor, "detach") else tensor
            entries[_EMA_PREFIX + "teacher." + name] = arr

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", FORMAT_VERSION))
        fh.write(config_digest(config))
        fh.write(struct.pack("<Q", len(entries)))
        for name in sorted(entries):
            _write_entry(fh, name, entries[name])


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_u64(fh, what: str) -> int:
    return struct.unpack("<Q", _read_exact(fh, 8, what))[0]


def load_checkpoint(path) -> LoadedCheckpoint:
    """Parse a checkpoint file; truncation or version drift raise errors
    naming what failed, and no partial state is returned."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        magic = _read_exact(fh, len(MAGIC), "magic string")
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        version = _read_u64(fh, "format version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        digest = _read_exact(fh, 32, "config digest")
        count = _read_u64(fh, "entry count")
        entries: dict[str, np.ndarray] = {}
        for index in range(count):
            name_len = _read_u64(fh, f"entry {index} name length")
            name = _read_exact(fh, name_len, f"entry {index} name").decode("utf-8")
            rank = _read_u64(fh, f"entry {name!r} rank")
            if rank > 8:
                raise CheckpointError(f"entry {name!r} has implausible rank {rank}")
            dims = tuple(_read_u64(fh, f"entry {name!r} dims") for _ in range(rank))
            n_values = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, 4 * n_values, f"entry {name!r} data")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError(f"{path} has trailing bytes after {count} entries")

    ema = None
    plain = {k: v for k, v in entries.items() if not k.startswith(_EMA_PREFIX)}
    if len(plain) != len(entries):
        extras = {k[len(_EMA_PREFIX):]: v for k, v in entries.items()
                  if k.startswith(_EMA_PREFIX)}
        if "alpha" not in extras or "step" not in extras:
            raise CheckpointError("EMA block is missing its alpha/step fields")
        teacher = {k[len("teacher."):]: v for k, v in extras.items()
                   if k.startswith("teacher.")}
        ema = LoadedEMA(alpha=float(extras["alpha"][0]),
                        step=int(round(float(extras["step"][0]))),
                        teacher=teacher)
    return LoadedCheckpoint(entries=plain, digest=digest, version=version, ema=ema)
