"""Versioned checkpoint blobs: a JSON header followed by raw array bytes.

Layout: 8-byte magic, uint32 little-endian header length, UTF-8 JSON header
(sorted keys), then each array's C-contiguous little-endian bytes in header
order. Bytes are fully deterministic for identical contents, so file
checksums double as parameter checksums.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SHCKPT01"


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    extra: dict
    seed: int
    config_hash: str


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    entries = []
    blobs = []
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append({"dtype": arr.dtype.str, "name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {
        "arrays": entries,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "format": 1,
        "kind": ckpt.kind,
        "seed": ckpt.seed,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"missing checkpoint file: {path}") from None
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise DataError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("format") != 1:
        raise DataError(f"unsupported checkpoint format in {path}")
    arrays = {}
    offset = 12 + hlen
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(raw):
            raise DataError(f"truncated checkpoint: {path}")
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    return Checkpoint(
        kind=header["kind"],
        arrays=arrays,
        extra=header["extra"],
        seed=header["seed"],
        config_hash=header["config_hash"],
    )


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_checkpoint_kind(path: Path, kind: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.kind != kind:
        raise DataError(f"checkpoint {path} has kind {ckpt.kind!r}, expected {kind!r}")
    return ckpt


def state_dict_arrays(module) -> dict[str, np.ndarray]:
    """torch state dict -> name->numpy dict in deterministic order."""
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict_arrays(module, arrays: dict[str, np.ndarray]) -> None:
    import torch

    module.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
