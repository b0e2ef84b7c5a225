"""On-disk model container: manifests, dense tensors, and column-sparse files.

This module is the sole owner of every file format in the toolkit:

* Dense tensor file: 8-byte magic ``RKTENSR\\0``, one u8 dtype code
  (0 = float32, 1 = float64), one u8 ndim (1 or 2), then ndim u64
  little-endian dims followed by the raw row-major payload.
* Sparse-columns file: the same header with dtype code 2 and dims (k, d2),
  followed by the CSC arrays ``col_ptr`` ((d2+1) x u64), ``row_idx``
  (nnz x u32), and ``values`` (nnz x float64), in that order.
* Model manifest: JSON ``{"format_version": 1, "layers": [{"name", "d1",
  "d2", "weight_ref", "gram_ref"}]}``. Refs are relative to the manifest's
  directory; ``gram_ref`` may be null or absent.
* Compressed manifest: JSON written by :func:`save_compressed`, one entry
  per layer that is either a (U, V) factor pair or a dense passthrough.

All tensors are loaded as float64 regardless of the stored dtype. Loads are
read-only and safe to call concurrently; saves assume exclusive ownership of
the output directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreError

MAGIC = b"RKTENSR\x00"
DTYPE_F32 = 0
DTYPE_F64 = 1
DTYPE_SPARSE = 2

_ELEM = {DTYPE_F32: ("<f4", 4), DTYPE_F64: ("<f8", 8)}

_U32_MAX = 2**32 - 1


# ---------------------------------------------------------------------------
# dense tensor files


def write_tensor(path: str | Path, arr: np.ndarray, dtype_code: int = DTYPE_F64) -> None:
    """Write a 1-D or 2-D array in the dense tensor format."""
    if dtype_code not in _ELEM:
        raise StoreError(f"unsupported dtype code {dtype_code}")
    arr = np.asarray(arr)
    if arr.ndim not in (1, 2):
        raise StoreError(f"tensor files hold 1-D or 2-D arrays, got ndim={arr.ndim}")
    np_dtype, _ = _ELEM[dtype_code]
    payload = np.ascontiguousarray(arr, dtype=np_dtype)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", dtype_code, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(payload.tobytes(order="C"))


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise StoreError(f"{path}: truncated file while reading {what}")
    return buf


def _read_header(f, path) -> tuple[int, tuple[int, ...]]:
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise StoreError(f"{path}: bad magic {magic!r}")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2, path, "header"))
    if ndim not in (1, 2):
        raise StoreError(f"{path}: ndim must be 1 or 2, got {ndim}")
    dims = tuple(
        struct.unpack("<Q", _read_exact(f, 8, path, "dims"))[0] for _ in range(ndim)
    )
    return code, dims


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a dense tensor file as a float64 array."""
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"missing tensor file {path}")
    with open(path, "rb") as f:
        code, dims = _read_header(f, path)
        if code not in _ELEM:
            raise StoreError(f"{path}: dtype code {code} is not a dense tensor")
        np_dtype, esize = _ELEM[code]
        payload = f.read()
    expected = int(np.prod(dims, dtype=np.int64)) * esize
    if len(payload) != expected:
        raise StoreError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} require {expected}"
        )
    return np.frombuffer(payload, dtype=np_dtype).astype(np.float64).reshape(dims)


# ---------------------------------------------------------------------------
# column-sparse coefficient files


@dataclass
class SparseColumns:
    """CSC storage for a k x d2 matrix whose columns are individually sparse.

    Explicit zeros are legal: the structural support, not the values, defines
    the stored nonzero count.
    """

    k: int
    d2: int
    col_ptr: np.ndarray  # (d2+1,) uint64, nondecreasing, col_ptr[0] == 0
    row_idx: np.ndarray  # (nnz,) uint32, strictly increasing within a column
    values: np.ndarray  # (nnz,) float64

    @property
    def nnz(self) -> int:
        return int(self.col_ptr[-1])

    @property
    def k_active(self) -> int:
        """Number of rows carrying at least one stored entry."""
        return int(np.unique(self.row_idx).size)

    def validate(self, path: str = "<memory>") -> None:
        if self.k < 0 or self.d2 < 0:
            raise StoreError(f"{path}: negative dims")
        if self.k > _U32_MAX:
            raise StoreError(f"{path}: k={self.k} overflows 32-bit row indices")
        if self.col_ptr.shape != (self.d2 + 1,):
            raise StoreError(f"{path}: col_ptr length {self.col_ptr.shape} != d2+1")
        ptr = self.col_ptr.astype(np.int64)
        if ptr[0] != 0:
            raise StoreError(f"{path}: col_ptr[0] must be 0")
        if np.any(np.diff(ptr) < 0):
            raise StoreError(f"{path}: col_ptr must be nondecreasing")
        nnz = int(ptr[-1])
        if self.row_idx.shape != (nnz,) or self.values.shape != (nnz,):
            raise StoreError(f"{path}: index/value arrays disagree with col_ptr[d2]={nnz}")
        rows = self.row_idx.astype(np.int64)
        if nnz and rows.max() >= self.k:
            raise StoreError(f"{path}: row index {rows.max()} out of range for k={self.k}")
        if nnz > 1:
            # strict increase within each column: consecutive entries that share
            # a column must have increasing rows
            col_of = np.repeat(np.arange(self.d2), np.diff(ptr))
            same = col_of[1:] == col_of[:-1]
            if np.any(np.diff(rows)[same] <= 0):
                raise StoreError(f"{path}: row indices not strictly increasing in a column")

    @classmethod
    def from_dense(cls, arr: np.ndarray) -> "SparseColumns":
        """Build from a dense matrix, keeping only nonzero entries."""
        return cls.from_mask(np.asarray(arr) != 0, arr)

    @classmethod
    def from_mask(cls, mask: np.ndarray, arr: np.ndarray) -> "SparseColumns":
        """Build from an explicit support mask; masked zeros stay stored."""
        arr = np.asarray(arr, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if arr.shape != mask.shape or arr.ndim != 2:
            raise StoreError("mask and matrix must be matching 2-D arrays")
        k, d2 = arr.shape
        # column-major scan yields (col, row) pairs sorted by col then row
        cols, rows = np.nonzero(mask.T)
        col_ptr = np.zeros(d2 + 1, dtype=np.uint64)
        np.cumsum(np.bincount(cols, minlength=d2), out=col_ptr[1:])
        sc = cls(
            k=k,
            d2=d2,
            col_ptr=col_ptr,
            row_idx=rows.astype(np.uint32),
            values=arr.T[cols, rows].astype(np.float64),
        )
        sc.validate()
        return sc

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.k, self.d2), dtype=np.float64)
        ptr = self.col_ptr.astype(np.int64)
        for j in range(self.d2):
            sl = slice(ptr[j], ptr[j + 1])
            out[self.row_idx[sl], j] = self.values[sl]
        return out


def write_sparse_columns(path: str | Path, sc: SparseColumns) -> None:
    sc.validate(str(path))
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", DTYPE_SPARSE, 2))
        f.write(struct.pack("<QQ", sc.k, sc.d2))
        f.write(np.ascontiguousarray(sc.col_ptr, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(sc.row_idx, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(sc.values, dtype="<f8").tobytes())


def read_sparse_columns(path: str | Path) -> SparseColumns:
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"missing sparse file {path}")
    with open(path, "rb") as f:
        code, dims = _read_header(f, path)
        if code != DTYPE_SPARSE:
            raise StoreError(f"{path}: dtype code {code} is not sparse-columns")
        if len(dims) != 2:
            raise StoreError(f"{path}: sparse files are 2-D")
        k, d2 = (int(d) for d in dims)
        col_ptr = np.frombuffer(
            _read_exact(f, (d2 + 1) * 8, path, "col_ptr"), dtype="<u8"
        )
        nnz = int(col_ptr[-1]) if d2 >= 0 else 0
        row_idx = np.frombuffer(_read_exact(f, nnz * 4, path, "row_idx"), dtype="<u4")
        values = np.frombuffer(_read_exact(f, nnz * 8, path, "values"), dtype="<f8")
        trailing = f.read()
    if trailing:
        raise StoreError(f"{path}: {len(trailing)} unexpected trailing bytes")
    sc = SparseColumns(
        k=k,
        d2=d2,
        col_ptr=col_ptr.copy(),
        row_idx=row_idx.copy(),
        values=values.astype(np.float64),
    )
    sc.validate(str(path))
    return sc


# ---------------------------------------------------------------------------
# model manifest


@dataclass
class LayerEntry:
    name: str
    d1: int
    d2: int
    weight_ref: str
    gram_ref: str | None = None


@dataclass
class ModelManifest:
    format_version: int
    layers: list[LayerEntry]

    @property
    def total_params(self) -> int:
        """Count of all compressible weight entries."""
        return sum(e.d1 * e.d2 for e in self.layers)


@dataclass
class LoadedModel:
    manifest: ModelManifest
    weights: dict[str, np.ndarray]
    grams: dict[str, np.ndarray] = field(default_factory=dict)


def read_manifest(manifest_path: str | Path) -> ModelManifest:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise StoreError(f"missing manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise StoreError(f"{manifest_path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or "layers" not in doc:
        raise StoreError(f"{manifest_path}: manifest must contain a 'layers' list")
    layers = []
    seen = set()
    for raw in doc["layers"]:
        try:
            entry = LayerEntry(
                name=str(raw["name"]),
                d1=int(raw["d1"]),
                d2=int(raw["d2"]),
                weight_ref=str(raw["weight_ref"]),
                gram_ref=raw.get("gram_ref"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise StoreError(f"{manifest_path}: malformed layer entry {raw!r}") from e
        if entry.d1 < 1 or entry.d2 < 1:
            raise StoreError(f"layer {entry.name}: dims must be >= 1")
        if entry.name in seen:
            raise StoreError(f"duplicate layer name {entry.name}")
        seen.add(entry.name)
        layers.append(entry)
    return ModelManifest(format_version=int(doc.get("format_version", 1)), layers=layers)


def write_manifest(manifest: ModelManifest, path: str | Path) -> None:
    doc = {
        "format_version": manifest.format_version,
        "layers": [
            {
                "name": e.name,
                "d1": e.d1,
                "d2": e.d2,
                "weight_ref": e.weight_ref,
                "gram_ref": e.gram_ref,
            }
            for e in manifest.layers
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _check_gram(name: str, gram: np.ndarray, d1: int) -> np.ndarray:
    if gram.ndim != 2 or gram.shape != (d1, d1):
        raise StoreError(f"layer {name}: gram must be {d1}x{d1}, got {gram.shape}")
    denom = max(float(np.linalg.norm(gram)), np.finfo(np.float64).tiny)
    if float(np.linalg.norm(gram - gram.T)) / denom > 1e-8:
        raise StoreError(f"layer {name}: gram matrix is not symmetric")
    return gram


def load_model(manifest_path: str | Path) -> LoadedModel:
    """Load a manifest plus all referenced weight and Gram tensors (float64)."""
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    base = manifest_path.parent
    weights: dict[str, np.ndarray] = {}
    grams: dict[str, np.ndarray] = {}
    for e in manifest.layers:
        try:
            w = read_tensor(base / e.weight_ref)
        except StoreError as err:
            raise StoreError(f"layer {e.name}: {err}") from err
        if w.shape != (e.d1, e.d2):
            raise StoreError(
                f"layer {e.name}: weight dims {w.shape} disagree with manifest "
                f"({e.d1}, {e.d2})"
            )
        weights[e.name] = w
        if e.gram_ref:
            try:
                g = read_tensor(base / e.gram_ref)
            except StoreError as err:
                raise StoreError(f"layer {e.name}: {err}") from err
            grams[e.name] = _check_gram(e.name, g, e.d1)
    return LoadedModel(manifest=manifest, weights=weights, grams=grams)


# ---------------------------------------------------------------------------
# compressed model output


@dataclass
class CompressedLayerRecord:
    name: str
    d1: int
    d2: int
    kind: str  # "factorized" or "dense"
    cost: int
    U: np.ndarray | None = None
    V: SparseColumns | None = None
    W: np.ndarray | None = None
    rank_k: int = 0
    error: float = 0.0


@dataclass
class CompressedModel:
    alpha_used: float
    total_error: float
    total_kept: int
    layers: list[CompressedLayerRecord]


def save_compressed(plan, factors, out_dir: str | Path) -> Path:
    """Write a compressed model directory and return its manifest path.

    ``plan`` supplies the bookkeeping totals (``total_kept``, ``total_error``,
    ``alpha_used``). ``factors`` maps layer name, in output order, to either a
    factorization with ``U`` (d1 x k) and ``C_sparse`` (k x d2, with the
    support in ``mask`` when values can be exactly zero), or to a plain
    float64 weight matrix for layers kept dense. The recorded kept-parameter
    count is d1*k + nnz(V) per factorized layer and d1*d2 per dense layer, and
    must equal the plan total.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StoreError(f"cannot create output directory {out_dir}: {e}") from e
    entries = []
    total_kept = 0
    for idx, (name, obj) in enumerate(factors.items()):
        fname = f"layer{idx:04d}"
        if isinstance(obj, np.ndarray):
            d1, d2 = obj.shape
            w_ref = f"{fname}.w.tensor"
            write_tensor(out_dir / w_ref, obj, DTYPE_F64)
            cost = d1 * d2
            entries.append(
                {
                    "name": name,
                    "d1": d1,
                    "d2": d2,
                    "kind": "dense",
                    "cost": cost,
                    "w_ref": w_ref,
                }
            )
        else:
            U = np.asarray(obj.U, dtype=np.float64)
            mask = getattr(obj, "mask", None)
            if mask is not None:
                V = SparseColumns.from_mask(mask, obj.C_sparse)
            else:
                V = SparseColumns.from_dense(obj.C_sparse)
            d1, k = U.shape
            d2 = V.d2
            u_ref = f"{fname}.u.tensor"
            v_ref = f"{fname}.v.sparse"
            write_tensor(out_dir / u_ref, U, DTYPE_F64)
            write_sparse_columns(out_dir / v_ref, V)
            cost = d1 * k + V.nnz
            entries.append(
                {
                    "name": name,
                    "d1": d1,
                    "d2": d2,
                    "kind": "factorized",
                    "rank_k": k,
                    "nnz": V.nnz,
                    "cost": cost,
                    "u_ref": u_ref,
                    "v_ref": v_ref,
                }
            )
        total_kept += cost
    if total_kept != int(plan.total_kept):
        raise StoreError(
            f"stored parameter count {total_kept} disagrees with plan total "
            f"{plan.total_kept}"
        )
    doc = {
        "format_version": 1,
        "kind": "compressed_model",
        "alpha_used": float(plan.alpha_used),
        "total_error": float(plan.total_error),
        "total_kept": total_kept,
        "layers": entries,
    }
    manifest_path = out_dir / "compressed.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest_path


def load_compressed(manifest_path: str | Path) -> CompressedModel:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "compressed.json"
    if not manifest_path.is_file():
        raise StoreError(f"missing compressed manifest {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise StoreError(f"{manifest_path}: invalid JSON ({e})") from e
    if doc.get("kind") != "compressed_model":
        raise StoreError(f"{manifest_path}: not a compressed model manifest")
    base = manifest_path.parent
    layers = []
    total = 0
    for raw in doc["layers"]:
        name = raw["name"]
        rec = CompressedLayerRecord(
            name=name,
            d1=int(raw["d1"]),
            d2=int(raw["d2"]),
            kind=raw["kind"],
            cost=int(raw["cost"]),
            error=float(raw.get("error", 0.0)),
        )
        if rec.kind == "dense":
            rec.W = read_tensor(base / raw["w_ref"])
            if rec.W.shape != (rec.d1, rec.d2):
                raise StoreError(f"layer {name}: dense payload dims mismatch")
            if rec.cost != rec.d1 * rec.d2:
                raise StoreError(f"layer {name}: dense cost must equal d1*d2")
        elif rec.kind == "factorized":
            rec.U = read_tensor(base / raw["u_ref"])
            rec.V = read_sparse_columns(base / raw["v_ref"])
            rec.rank_k = int(raw["rank_k"])
            if rec.U.shape != (rec.d1, rec.rank_k):
                raise StoreError(f"layer {name}: U dims mismatch")
            if (rec.V.k, rec.V.d2) != (rec.rank_k, rec.d2):
                raise StoreError(f"layer {name}: V dims mismatch")
            if rec.cost != rec.d1 * rec.rank_k + rec.V.nnz:
                raise StoreError(f"layer {name}: recorded cost disagrees with payload")
        else:
            raise StoreError(f"layer {name}: unknown kind {rec.kind!r}")
        total += rec.cost
        layers.append(rec)
    if total != int(doc["total_kept"]):
        raise StoreError(f"{manifest_path}: total_kept disagrees with layer costs")
    return CompressedModel(
        alpha_used=float(doc["alpha_used"]),
        total_error=float(doc["total_error"]),
        total_kept=total,
        layers=layers,
    )
