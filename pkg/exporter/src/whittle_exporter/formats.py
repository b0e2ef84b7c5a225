"""Writers for the compression toolkit's on-disk interchange formats.

Deliberately reimplemented here rather than imported: this package couples
to the core tool only through its file formats, and the core's own loader
validates everything we write (the round-trip is covered in tests).

* Tensor file: 8-byte magic ``RKTENSR\\0``, u8 dtype code (0 = float32,
  1 = float64), u8 ndim, ndim x u64 little-endian dims, raw row-major
  payload.
* Manifest: JSON ``{"format_version": 1, "layers": [{"name", "d1", "d2",
  "weight_ref", "gram_ref"}]}`` with refs relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RKTENSR\x00"
DTYPE_F32 = 0
DTYPE_F64 = 1

_NP_DTYPE = {DTYPE_F32: "<f4", DTYPE_F64: "<f8"}


def write_tensor(path: str | Path, arr: np.ndarray, dtype_code: int = DTYPE_F64) -> None:
    arr = np.asarray(arr)
    if arr.ndim not in (1, 2):
        raise ValueError(f"tensor files hold 1-D or 2-D arrays, got ndim={arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype=_NP_DTYPE[dtype_code])
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", dtype_code, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(payload.tobytes(order="C"))


def write_manifest(layers: list[dict], path: str | Path) -> None:
    """``layers`` entries carry name, d1, d2, weight_ref and optional gram_ref."""
    doc = {
        "format_version": 1,
        "layers": [
            {
                "name": e["name"],
                "d1": int(e["d1"]),
                "d2": int(e["d2"]),
                "weight_ref": e["weight_ref"],
                "gram_ref": e.get("gram_ref"),
            }
            for e in layers
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    return json.loads(Path(path).read_text())["layers"]
