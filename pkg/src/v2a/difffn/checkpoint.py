"""Binary parameter checkpoints.

Layout: magic bytes "V2A1", format version u32, a named-segment table
(u16 name length, utf-8 name, u64 offset, u64 length), then the little-endian
float64 parameter payload. A JSON sidecar `<path>.json` records the config
hash and RNG seed of the producing run.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .nets import ParamVector

MAGIC = b"V2A1"
VERSION = 1


def save_params(path, params: ParamVector, config_hash: str, seed: int, extra=None):
    path = Path(path)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(params.layout))
    for name, (off, length) in params.layout.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<QQ", off, length)
    blob += params.values.astype("<f8").tobytes()
    path.write_bytes(bytes(blob))
    sidecar = {"config_hash": config_hash, "seed": int(seed)}
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_params(path) -> ParamVector:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ConfigError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    (n_segments,) = struct.unpack_from("<I", raw, 8)
    cursor = 12
    layout = {}
    for _ in range(n_segments):
        (name_len,) = struct.unpack_from("<H", raw, cursor)
        cursor += 2
        name = raw[cursor : cursor + name_len].decode("utf-8")
        cursor += name_len
        off, length = struct.unpack_from("<QQ", raw, cursor)
        cursor += 16
        layout[name] = (off, length)
    values = np.frombuffer(raw[cursor:], dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)


def load_sidecar(path) -> dict:
    return json.loads(Path(str(path) + ".json").read_text())
