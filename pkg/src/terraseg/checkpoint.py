"""Checkpoint archive: model config header plus named raw float32 parameters.

A checkpoint is a single uncompressed zip with three members:

  config.json   human-readable header: model config + caller metadata
  params.json   ordered list of {name, shape, dtype, offset, nbytes}
  params.bin    concatenated little-endian float32 parameter payloads

Member timestamps are fixed, so identical parameters produce byte-identical
archives. Parameter names are the model's dotted attribute paths (e.g.
``encoder.stages.0.blocks.0.attn.qkv.weight``); the full key list for a
given config is exactly ``model.state_dict().keys()``.
"""

from __future__ import annotations

import json
import zipfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import DataError

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, state: "OrderedDict[str, np.ndarray]", metadata: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model": cfg.to_dict(),
        "metadata": metadata or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for member, payload in (
            ("config.json", json.dumps(header, indent=2).encode()),
            ("params.json", json.dumps(index, indent=2).encode()),
            ("params.bin", b"".join(blobs)),
        ):
            info = zipfile.ZipInfo(member, date_time=_EPOCH)
            zf.writestr(info, payload)


def load_checkpoint(path) -> tuple:
    """Returns (ModelConfig, OrderedDict name -> float32 array, metadata)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("config.json"))
            index = json.loads(zf.read("params.json"))
            payload = zf.read("params.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported format version {header.get('format_version')}")
    cfg = ModelConfig.from_dict(header["model"])
    state: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for rec in index:
        start, nbytes = rec["offset"], rec["nbytes"]
        shape = tuple(rec["shape"])
        expected = int(np.prod(shape)) * 4 if shape else 4
        if nbytes != expected or start + nbytes > len(payload):
            raise DataError(f"corrupt checkpoint {path}: bad payload for parameter {rec['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=start).reshape(shape)
        state[rec["name"]] = arr.astype(np.float32, copy=True)
    return cfg, state, header.get("metadata", {})
