import json
from pathlib import Path

import numpy as np
import pytest

from whittle import store
from whittle.allocator import MckpInstance, brute_force_oracle
from whittle.cli import main
from whittle.profiler import CompressionOption, OptionSet, options_to_json, CandidateGrid
from whittle.runtime import CompressedLayer, flop_count
from whittle.synth import make_synthetic_model

DIMS = ((12, 20), (16, 16), (20, 12), (14, 18))


def _model(tmp_path, **kw):
    return make_synthetic_model(tmp_path / "model", dims=DIMS, n_calib=64, seed=7, **kw)


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


# ---------------------------------------------------------------------------
# gram


def test_gram_matches_dense_product(tmp_path):
    manifest = _model(tmp_path, with_grams=False, activation_shards=1)
    out = tmp_path / "grams"
    assert main(["gram", "--manifest", str(manifest), "--activations", str(manifest.parent), "--out", str(out)]) == 0
    for i, (d1, _) in enumerate(DIMS):
        X = store.read_tensor(manifest.parent / f"layer{i}.act0.tensor")
        G = store.read_tensor(out / f"layer{i}.gram.tensor")
        assert np.allclose(G, X.T @ X, atol=1e-12)
    meta = json.loads((out / "gram_meta.json").read_text())
    assert meta["n_rows"]["layer0"] == 64
    # the updated manifest loads cleanly with grams attached
    model = store.load_model(out / "manifest.json")
    assert set(model.grams) == {f"layer{i}" for i in range(len(DIMS))}


def test_gram_identity_activations(tmp_path):
    root = tmp_path / "m"
    root.mkdir()
    store.write_tensor(root / "l0.weight.tensor", np.ones((3, 2)))
    store.write_tensor(root / "l0.act0.tensor", np.eye(3))
    store.write_manifest(
        store.ModelManifest(1, [store.LayerEntry("l0", 3, 2, "l0.weight.tensor")]),
        root / "manifest.json",
    )
    out = tmp_path / "g"
    assert main(["gram", "--manifest", str(root / "manifest.json"), "--activations", str(root), "--out", str(out)]) == 0
    assert np.array_equal(store.read_tensor(out / "l0.gram.tensor"), np.eye(3))


def test_gram_shard_additivity(tmp_path):
    one = _model(tmp_path / "a", with_grams=False, activation_shards=1)
    two = _model(tmp_path / "b", with_grams=False, activation_shards=2)
    out1, out2 = tmp_path / "g1", tmp_path / "g2"
    main(["gram", "--manifest", str(one), "--activations", str(one.parent), "--out", str(out1)])
    main(["gram", "--manifest", str(two), "--activations", str(two.parent), "--out", str(out2)])
    for i in range(len(DIMS)):
        a = store.read_tensor(out1 / f"layer{i}.gram.tensor")
        b = store.read_tensor(out2 / f"layer{i}.gram.tensor")
        assert np.allclose(a, b, atol=1e-9)


def test_gram_missing_dump_fails(tmp_path):
    manifest = _model(tmp_path, with_grams=False, activation_shards=0)
    rc = main(["gram", "--manifest", str(manifest), "--activations", str(manifest.parent), "--out", str(tmp_path / "g")])
    assert rc == 2


def test_gram_dump_dim_mismatch_fails(tmp_path):
    manifest = _model(tmp_path, with_grams=False, activation_shards=1)
    wrong = np.ones((4, DIMS[0][0] + 1))
    store.write_tensor(manifest.parent / "layer0.act1.tensor", wrong)
    rc = main(["gram", "--manifest", str(manifest), "--activations", str(manifest.parent), "--out", str(tmp_path / "g")])
    assert rc == 2


# ---------------------------------------------------------------------------
# profile


def test_default_grid_cardinality():
    from whittle.profiler import DEFAULT_KS_FRACS, DEFAULT_RANK_FRACS

    assert len(DEFAULT_RANK_FRACS) * len(DEFAULT_KS_FRACS) == 40


def test_profile_writes_options_and_is_deterministic(tmp_path):
    manifest = _model(tmp_path)
    out1, out2 = tmp_path / "o1.json", tmp_path / "o2.json"
    args = ["profile", "--manifest", str(manifest), "--rank-grid", "0.25,0.5,1.0", "--ks-grid", "0.5,1.0"]
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    doc = json.loads(out1.read_text())
    assert len(doc["layers"]) == len(DIMS)
    for raw in doc["layers"]:
        costs = [o["cost"] for o in raw["options"]]
        assert costs == sorted(costs)
        assert any(o["rank_k"] == 0 for o in raw["options"])  # identity present


def test_profile_identity_grid(tmp_path):
    manifest = _model(tmp_path)
    out = tmp_path / "o.json"
    assert main(["profile", "--manifest", str(manifest), "--rank-grid", "1.0", "--ks-grid", "1.0", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    for raw in doc["layers"]:
        assert [o["rank_k"] for o in raw["options"]] == [0]


def test_profile_requires_grams(tmp_path):
    manifest = _model(tmp_path, with_grams=False)
    rc = main(["profile", "--manifest", str(manifest), "--out", str(tmp_path / "o.json")])
    assert rc == 2


# ---------------------------------------------------------------------------
# allocate


def _profile(tmp_path, manifest, name="options.json", extra=()):
    out = tmp_path / name
    assert main(["profile", "--manifest", str(manifest), "--out", str(out), *extra]) == 0
    return out


def test_allocate_zero_cr_is_all_identity(tmp_path, capsys):
    manifest = _model(tmp_path)
    options = _profile(tmp_path, manifest)
    plan_path = tmp_path / "plan.json"
    assert main(["allocate", "--options", str(options), "--cr", "0.0", "--out", str(plan_path)]) == 0
    doc = json.loads(plan_path.read_text())
    assert doc["total_error"] == 0.0
    assert all(layer["rank_k"] == 0 for layer in doc["layers"].values())
    assert doc["total_kept"] == sum(d1 * d2 for d1, d2 in DIMS)


def test_allocate_respects_budget(tmp_path):
    manifest = _model(tmp_path)
    options = _profile(tmp_path, manifest)
    plan_path = tmp_path / "plan.json"
    assert main(["allocate", "--options", str(options), "--cr", "0.3", "--out", str(plan_path)]) == 0
    doc = json.loads(plan_path.read_text())
    total = sum(d1 * d2 for d1, d2 in DIMS)
    assert doc["total_kept"] <= int(0.7 * total)
    assert doc["budget_kept"] == int(0.7 * total)


def test_allocate_matches_brute_force_on_crafted_options(tmp_path):
    sets = [
        OptionSet("a", 4, 5, [
            CompressionOption(1, 1, 9, 1.0, 0.7),
            CompressionOption(2, 1, 13, 0.5, 0.25),
            CompressionOption(0, 0, 20, 1.0, 0.0),
        ]),
        OptionSet("b", 3, 6, [
            CompressionOption(1, 1, 9, 1.0, 0.5),
            CompressionOption(2, 2, 18, 1.0, 0.0),
        ]),
    ]
    grid = CandidateGrid(rank_fracs=(0.5, 1.0), ks_fracs=(0.5, 1.0))
    opt_path = tmp_path / "options.json"
    opt_path.write_text(json.dumps(options_to_json(sets, grid)))
    plan_path = tmp_path / "plan.json"
    assert main(["allocate", "--options", str(opt_path), "--cr", "0.3", "--alpha", "inf", "--out", str(plan_path)]) == 0
    doc = json.loads(plan_path.read_text())
    budget = int(0.7 * (20 + 18))
    bf = brute_force_oracle(
        MckpInstance(layers=sets, budget_kept=budget, alpha=float("inf"), e_ref=1.0, param_precision=38)
    )
    assert doc["total_error"] == pytest.approx(bf.total_error, abs=1e-12)
    assert doc["total_kept"] <= budget


def test_allocate_infeasible_exit_code(tmp_path):
    sets = [OptionSet("a", 4, 5, [CompressionOption(1, 1, 19, 1.0, 0.7)])]
    grid = CandidateGrid(rank_fracs=(0.5,), ks_fracs=(1.0,))
    opt_path = tmp_path / "options.json"
    opt_path.write_text(json.dumps(options_to_json(sets, grid)))
    rc = main(["allocate", "--options", str(opt_path), "--cr", "0.5", "--out", str(tmp_path / "p.json")])
    assert rc == 2


# ---------------------------------------------------------------------------
# compress + eval


def _pipeline(tmp_path, cr="0.3", extra=()):
    manifest = _model(tmp_path)
    options = _profile(tmp_path, manifest, extra=extra)
    plan = tmp_path / "plan.json"
    assert main(["allocate", "--options", str(options), "--cr", cr, "--out", str(plan), *extra]) == 0
    out = tmp_path / "compressed"
    assert main(["compress", "--manifest", str(manifest), "--plan", str(plan), "--out", str(out)]) == 0
    return manifest, plan, out


def test_compress_identity_plan_is_exact(tmp_path):
    manifest, _, out = _pipeline(tmp_path, cr="0.0")
    model = store.load_model(manifest)
    compressed = store.load_compressed(out)
    for rec in compressed.layers:
        assert rec.kind == "dense"
        assert np.array_equal(rec.W, model.weights[rec.name])


def test_compress_rerun_is_byte_identical(tmp_path):
    manifest = _model(tmp_path)
    options = _profile(tmp_path, manifest)
    plan = tmp_path / "plan.json"
    assert main(["allocate", "--options", str(options), "--cr", "0.3", "--out", str(plan)]) == 0
    plan2 = tmp_path / "plan2.json"
    assert main(["allocate", "--options", str(options), "--cr", "0.3", "--out", str(plan2)]) == 0
    assert plan.read_bytes() == plan2.read_bytes()
    out1, out2 = tmp_path / "c1", tmp_path / "c2"
    assert main(["compress", "--manifest", str(manifest), "--plan", str(plan), "--out", str(out1)]) == 0
    assert main(["compress", "--manifest", str(manifest), "--plan", str(plan), "--out", str(out2)]) == 0
    assert _dir_bytes(out1) == _dir_bytes(out2)


def test_compress_budget_and_round_trip(tmp_path):
    manifest, plan, out = _pipeline(tmp_path)
    plan_doc = json.loads(Path(plan).read_text())
    compressed = store.load_compressed(out)
    assert compressed.total_kept == plan_doc["total_kept"]
    assert compressed.total_kept <= plan_doc["budget_kept"]


def test_compress_plan_mismatch(tmp_path):
    manifest, plan, _ = _pipeline(tmp_path)
    doc = json.loads(Path(plan).read_text())
    doc["layers"]["ghost"] = doc["layers"].pop("layer0")
    bad = tmp_path / "bad_plan.json"
    bad.write_text(json.dumps(doc))
    rc = main(["compress", "--manifest", str(manifest), "--plan", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2


def test_eval_self_comparison_is_zero(tmp_path):
    manifest, _, out = _pipeline(tmp_path, cr="0.0")
    report = tmp_path / "eval.json"
    assert main(["eval", "--manifest", str(manifest), "--compressed", str(out), "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    for row in doc["layers"]:
        assert row["frobenius_rel"] == 0.0
        assert row["activation_rel"] == 0.0
        assert row["mean_cos_cols"] == 0.0


def test_eval_flops_match_runtime_op(tmp_path):
    manifest, _, out = _pipeline(tmp_path)
    report = tmp_path / "eval.json"
    assert main(["eval", "--manifest", str(manifest), "--compressed", str(out), "--probe-n", "8", "--out", str(report)]) == 0
    doc = json.loads(report.read_text())
    compressed = store.load_compressed(out)
    by_name = {rec.name: rec for rec in compressed.layers}
    for row in doc["layers"]:
        rec = by_name[row["layer"]]
        if rec.kind == "factorized":
            layer = CompressedLayer.from_parts(rec.U, rec.V)
            assert row["flops"] == flop_count(layer, 8)
        else:
            assert row["flops"] == 8 * rec.d1 * rec.d2
        if row["activation_bound"] is not None:
            assert row["activation_bound"] >= row["frobenius_rel"] - 1e-12


def test_eval_without_grams_skips_bound(tmp_path):
    manifest, _, out = _pipeline(tmp_path, cr="0.0")
    # strip the gram refs: eval still works, just without the bound column
    doc = json.loads(Path(manifest).read_text())
    for layer in doc["layers"]:
        layer["gram_ref"] = None
    bare = manifest.parent / "bare.json"
    bare.write_text(json.dumps(doc))
    report = tmp_path / "eval.json"
    assert main(["eval", "--manifest", str(bare), "--compressed", str(out), "--out", str(report)]) == 0
    rows = json.loads(report.read_text())["layers"]
    assert all(row["activation_bound"] is None for row in rows)


def test_eval_probe_dir(tmp_path):
    manifest, _, out = _pipeline(tmp_path)
    probes = tmp_path / "probes"
    probes.mkdir()
    rng = np.random.default_rng(0)
    for i, (d1, _) in enumerate(DIMS):
        store.write_tensor(probes / f"layer{i}.probe.tensor", rng.standard_normal((5, d1)))
    assert main(["eval", "--manifest", str(manifest), "--compressed", str(out), "--probe-dir", str(probes)]) == 0
    assert (out / "eval.json").is_file()


# ---------------------------------------------------------------------------
# config + exit codes


def test_config_file_and_flag_override(tmp_path):
    manifest = _model(tmp_path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rank_fracs": [1.0], "ks_fracs": [1.0], "target_cr": 0.2}))
    out = tmp_path / "o.json"
    assert main(["profile", "--manifest", str(manifest), "--config", str(cfg), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["grid"]["rank_fracs"] == [1.0]
    # flags win over the file
    out2 = tmp_path / "o2.json"
    assert main(["profile", "--manifest", str(manifest), "--config", str(cfg), "--rank-grid", "0.5,1.0", "--out", str(out2)]) == 0
    assert json.loads(out2.read_text())["grid"]["rank_fracs"] == [0.5, 1.0]


def test_usage_errors_exit_one(tmp_path):
    assert main(["profile", "--manifest", "m.json", "--out", "o.json", "--cr", "1.5"]) == 1
    assert main(["allocate", "--options", "x.json", "--out", "p.json", "--alpha", "-2"]) == 1
    assert main(["frobnicate"]) == 1


def test_unknown_flag_exits_one():
    try:
        rc = main(["profile", "--manifest", "m.json", "--out", "o.json", "--bogus"])
    except SystemExit as e:  # argparse may still raise for unknown args
        rc = e.code
    assert rc == 1


def test_missing_manifest_exits_two(tmp_path):
    assert main(["profile", "--manifest", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.json")]) == 2
