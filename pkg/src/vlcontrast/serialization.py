"""Versioned binary checkpoint container.

Layout: magic ``TCLC``, u32 version, u32 header length, canonical JSON header,
then raw little-endian float64 blobs concatenated in header order. The header
echoes the resolved config, the step counter, RNG derivation info and the
blob manifest, so save -> load -> save reproduces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .common import ConfigurationError

_MAGIC = b"TCLC"
_VERSION = 1
_PREFIX = struct.Struct("<4sII")


def save_checkpoint(path: str, config: dict, step: int, arrays: dict[str, np.ndarray], meta: dict):
    header = {
        "version": _VERSION,
        "dtype": "<f8",
        "step": int(step),
        "config": config,
        "meta": meta,
        "blobs": [{"name": name, "shape": list(a.shape)} for name, a in arrays.items()],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(_MAGIC, _VERSION, len(payload)))
        f.write(payload)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict, int, dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic, version, header_len = _PREFIX.unpack(f.read(_PREFIX.size))
        if magic != _MAGIC:
            raise ConfigurationError(f"not a checkpoint file (magic {magic!r})")
        if version != _VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for blob in header["blobs"]:
            shape = tuple(blob["shape"])
            n = int(np.prod(shape)) if shape else 1
            arrays[blob["name"]] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    return header["config"], header["step"], arrays, header["meta"]
