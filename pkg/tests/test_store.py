import json
import struct

import numpy as np
import pytest

from whittle import store
from whittle.errors import StoreError


def test_tensor_round_trip_f64(tmp_path):
    arr = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
    path = tmp_path / "a.tensor"
    store.write_tensor(path, arr)
    back = store.read_tensor(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr)
    # writing the loaded array again reproduces the file byte for byte
    path2 = tmp_path / "b.tensor"
    store.write_tensor(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_tensor_round_trip_f32(tmp_path):
    arr = np.linspace(-1, 1, 10, dtype=np.float32)
    path = tmp_path / "a.tensor"
    store.write_tensor(path, arr, store.DTYPE_F32)
    back = store.read_tensor(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, arr.astype(np.float64))


def test_tensor_header_errors(tmp_path):
    path = tmp_path / "a.tensor"
    store.write_tensor(path, np.ones((2, 2)))
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.tensor"
    bad_magic.write_bytes(b"XXTENSR\x00" + bytes(raw[8:]))
    with pytest.raises(StoreError, match="magic"):
        store.read_tensor(bad_magic)

    bad_ndim = tmp_path / "ndim.tensor"
    corrupt = bytearray(raw)
    corrupt[9] = 3
    bad_ndim.write_bytes(bytes(corrupt))
    with pytest.raises(StoreError, match="ndim"):
        store.read_tensor(bad_ndim)

    truncated = tmp_path / "trunc.tensor"
    truncated.write_bytes(bytes(raw[:-4]))
    with pytest.raises(StoreError, match="payload"):
        store.read_tensor(truncated)

    with pytest.raises(StoreError, match="missing"):
        store.read_tensor(tmp_path / "nope.tensor")


def _write_model(tmp_path, layers):
    entries = []
    for name, W, gram in layers:
        wref = f"{name}.weight.tensor"
        store.write_tensor(tmp_path / wref, W)
        gref = None
        if gram is not None:
            gref = f"{name}.gram.tensor"
            store.write_tensor(tmp_path / gref, gram)
        entries.append(
            {"name": name, "d1": W.shape[0], "d2": W.shape[1], "weight_ref": wref, "gram_ref": gref}
        )
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"format_version": 1, "layers": entries}))
    return path


def test_load_model_counts_params(tmp_path):
    path = _write_model(tmp_path, [("l0", np.ones((2, 3)), None)])
    model = store.load_model(path)
    assert model.manifest.total_params == 6
    assert model.weights["l0"].shape == (2, 3)


def test_load_model_dim_mismatch_names_layer(tmp_path):
    path = _write_model(tmp_path, [("lay_x", np.ones((2, 3)), None)])
    doc = json.loads(path.read_text())
    doc["layers"][0]["d1"] = 4
    path.write_text(json.dumps(doc))
    with pytest.raises(StoreError, match="lay_x"):
        store.load_model(path)


def test_load_model_rejects_asymmetric_gram(tmp_path):
    gram = np.array([[1.0, 0.5], [0.0, 1.0]])
    path = _write_model(tmp_path, [("l0", np.ones((2, 2)), gram)])
    with pytest.raises(StoreError, match="symmetric"):
        store.load_model(path)


def test_load_model_duplicate_names(tmp_path):
    path = _write_model(tmp_path, [("l0", np.ones((2, 2)), None)])
    doc = json.loads(path.read_text())
    doc["layers"].append(doc["layers"][0])
    path.write_text(json.dumps(doc))
    with pytest.raises(StoreError, match="duplicate"):
        store.load_model(path)


# ---------------------------------------------------------------------------
# sparse columns


def test_sparse_round_trip(tmp_path, rng):
    dense = rng.standard_normal((6, 5)) * (rng.random((6, 5)) < 0.4)
    sc = store.SparseColumns.from_dense(dense)
    path = tmp_path / "v.sparse"
    store.write_sparse_columns(path, sc)
    back = store.read_sparse_columns(path)
    assert back.k == 6 and back.d2 == 5
    assert np.array_equal(back.to_dense(), sc.to_dense())
    path2 = tmp_path / "v2.sparse"
    store.write_sparse_columns(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_sparse_from_mask_keeps_explicit_zeros():
    arr = np.array([[0.0, 2.0], [3.0, 0.0]])
    mask = np.ones((2, 2), dtype=bool)
    sc = store.SparseColumns.from_mask(mask, arr)
    assert sc.nnz == 4
    assert np.array_equal(sc.to_dense(), arr)


def test_sparse_corrupt_files_rejected(tmp_path, rng):
    dense = rng.standard_normal((5, 4)) * (rng.random((5, 4)) < 0.5)
    sc = store.SparseColumns.from_dense(dense)
    good = tmp_path / "good.sparse"
    store.write_sparse_columns(good, sc)
    raw = good.read_bytes()
    hdr = len(store.MAGIC) + 2 + 16  # magic + codes + dims
    nnz = sc.nnz

    def corrupted(mutate):
        buf = bytearray(raw)
        mutate(buf)
        p = tmp_path / "bad.sparse"
        p.write_bytes(bytes(buf))
        return p

    cases = [
        lambda b: b.__setitem__(slice(0, 8), b"WRONGMAG"),  # magic
        lambda b: b.__setitem__(8, 0),  # dtype code says dense
        lambda b: b.__setitem__(9, 1),  # ndim 1
        lambda b: b.__setitem__(slice(hdr, hdr + 8), struct.pack("<Q", 99)),  # col_ptr[0] != 0
        # nnz in col_ptr[-1] inflated beyond the stored arrays
        lambda b: b.__setitem__(
            slice(hdr + 4 * 8, hdr + 5 * 8), struct.pack("<Q", nnz + 3)
        ),
        lambda b: b.__setitem__(slice(len(b) - 4, len(b)), b""),  # truncated values
        lambda b: b.extend(b"\x00" * 5),  # trailing garbage
    ]
    for mutate in cases:
        with pytest.raises(StoreError):
            store.read_sparse_columns(corrupted(mutate))

    # decreasing col_ptr
    buf = bytearray(raw)
    buf[hdr : hdr + 16] = struct.pack("<QQ", 2, 1) + b""
    bad = tmp_path / "bad2.sparse"
    bad.write_bytes(bytes(buf))
    with pytest.raises(StoreError):
        store.read_sparse_columns(bad)

    # duplicate row index inside one column
    if nnz >= 2 and sc.col_ptr[1] >= 2:
        buf = bytearray(raw)
        off = hdr + 5 * 8
        buf[off : off + 8] = struct.pack("<II", int(sc.row_idx[1]), int(sc.row_idx[1]))
        bad = tmp_path / "bad3.sparse"
        bad.write_bytes(bytes(buf))
        with pytest.raises(StoreError):
            store.read_sparse_columns(bad)


def test_sparse_row_index_overflow_guard():
    sc = store.SparseColumns(
        k=2**32,
        d2=1,
        col_ptr=np.array([0, 0], dtype=np.uint64),
        row_idx=np.array([], dtype=np.uint32),
        values=np.array([], dtype=np.float64),
    )
    with pytest.raises(StoreError, match="overflow"):
        sc.validate()


# ---------------------------------------------------------------------------
# compressed output


class _FakePlan:
    def __init__(self, total_kept, total_error=0.0, alpha_used=1.0):
        self.total_kept = total_kept
        self.total_error = total_error
        self.alpha_used = alpha_used


class _FakeFactor:
    def __init__(self, U, C_sparse, mask=None):
        self.U = U
        self.C_sparse = C_sparse
        self.mask = mask


def test_save_compressed_records_cost(tmp_path, rng):
    # k=2, d1=4, nnz=5 -> recorded layer cost 4*2 + 5 = 13
    U = rng.standard_normal((4, 2))
    mask = np.zeros((2, 5), dtype=bool)
    mask.ravel()[:5] = True
    C = np.where(mask, rng.standard_normal((2, 5)), 0.0)
    f = _FakeFactor(U, C, mask)
    path = store.save_compressed(_FakePlan(13), {"l0": f}, tmp_path / "out")
    model = store.load_compressed(path)
    assert model.total_kept == 13
    assert model.layers[0].cost == 13


def test_save_compressed_empty_plan(tmp_path):
    path = store.save_compressed(_FakePlan(0), {}, tmp_path / "out")
    model = store.load_compressed(path)
    assert model.total_kept == 0
    assert model.layers == []


def test_save_compressed_total_mismatch(tmp_path, rng):
    f = _FakeFactor(rng.standard_normal((4, 2)), np.zeros((2, 5)), np.zeros((2, 5), bool))
    with pytest.raises(StoreError, match="disagrees"):
        store.save_compressed(_FakePlan(99), {"l0": f}, tmp_path / "out")


def test_compressed_round_trip_forward_identical(tmp_path, rng):
    # 4 synthetic factorized layers: save, load, forward twice, bit-identical
    from whittle import runtime

    factors = {}
    layers = []
    total = 0
    for i in range(4):
        d1, k, d2 = 6 + i, 3, 5 + i
        U = rng.standard_normal((d1, k))
        mask = rng.random((k, d2)) < 0.6
        C = np.where(mask, rng.standard_normal((k, d2)), 0.0)
        f = _FakeFactor(U, C, mask)
        factors[f"l{i}"] = f
        total += d1 * k + int(mask.sum())
        layers.append((U, mask, C))
    path = store.save_compressed(_FakePlan(total), factors, tmp_path / "out")
    model = store.load_compressed(path)
    for (U, mask, C), rec in zip(layers, model.layers):
        assert np.array_equal(rec.U, U)
        assert np.array_equal(rec.V.to_dense(), C)
        X = rng.standard_normal((3, U.shape[0]))
        rt = runtime.CompressedLayer.from_parts(rec.U, rec.V)
        ref = runtime.CompressedLayer.from_parts(U, store.SparseColumns.from_mask(mask, C))
        assert np.array_equal(runtime.forward(rt, X), runtime.forward(ref, X))
    # byte-exact re-save
    again = store.save_compressed(
        _FakePlan(total),
        {rec.name: _FakeFactor(rec.U, rec.V.to_dense(), rec.V.to_dense() != 0) for rec in model.layers},
        tmp_path / "out2",
    )
    for a, b in zip(sorted((tmp_path / "out").iterdir()), sorted((tmp_path / "out2").iterdir())):
        assert a.read_bytes() == b.read_bytes(), (a, b)
