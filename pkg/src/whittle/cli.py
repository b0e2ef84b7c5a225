"""Command-line pipeline: gram -> profile -> allocate -> compress -> eval.

Each stage reads and writes JSON or tensor artifacts, so runs are
checkpointable and every stage is independently testable. Identical configs
and inputs produce byte-identical outputs. Exit codes: 0 success, 1 usage
error, 2 numerical or infeasibility failure.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import allocator, profiler, runtime, store
from .errors import UsageError, WhittleError
from .profiler import CandidateGrid
from .refit import METRICS, error_report
from .sparsifier import MODES
from .whitening import build_whitener


@dataclass
class RunConfig:
    target_cr: float = 0.3
    rank_fracs: tuple[float, ...] = profiler.DEFAULT_RANK_FRACS
    ks_fracs: tuple[float, ...] = profiler.DEFAULT_KS_FRACS
    lam: float = 0.5
    beta_margin: float = 5e-3
    mu: float = 0.0
    error_metric: str = "frobenius_rel"
    sparsify_mode: str = "column_two_stage"
    alpha: float | str = "auto"
    param_precision: int = 100000
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.target_cr < 1.0:
            raise UsageError(f"--cr must be in [0, 1), got {self.target_cr}")
        if self.error_metric not in METRICS:
            raise UsageError(f"--error-metric must be one of {METRICS}")
        if self.sparsify_mode not in MODES:
            raise UsageError(f"--mode must be one of {MODES}")
        if self.alpha != "auto" and float(self.alpha) < 0:
            raise UsageError("--alpha must be 'auto' or a nonnegative number")
        if self.param_precision < 1:
            raise UsageError("--param-precision must be positive")
        try:
            self.grid()
        except ValueError as e:
            raise UsageError(str(e)) from e

    def grid(self) -> CandidateGrid:
        return CandidateGrid(
            rank_fracs=self.rank_fracs,
            ks_fracs=self.ks_fracs,
            lam=self.lam,
            beta_margin=self.beta_margin,
            mu=self.mu,
            error_metric=self.error_metric,
        )


def _parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as e:
        raise UsageError(f"bad grid list {text!r}") from e


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"missing config file {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from e
        known = set(RunConfig.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        for key in ("rank_fracs", "ks_fracs"):
            if key in doc:
                doc[key] = tuple(doc[key])
        cfg = replace(cfg, **doc)
    overrides = {
        "target_cr": getattr(args, "cr", None),
        "lam": getattr(args, "lam", None),
        "beta_margin": getattr(args, "beta", None),
        "mu": getattr(args, "mu", None),
        "error_metric": getattr(args, "error_metric", None),
        "sparsify_mode": getattr(args, "mode", None),
        "param_precision": getattr(args, "param_precision", None),
        "seed": getattr(args, "seed", None),
    }
    if getattr(args, "rank_grid", None):
        overrides["rank_fracs"] = _parse_grid(args.rank_grid)
    if getattr(args, "ks_grid", None):
        overrides["ks_fracs"] = _parse_grid(args.ks_grid)
    alpha = getattr(args, "alpha", None)
    if alpha is not None:
        if alpha != "auto":
            try:
                alpha = float(alpha)
            except ValueError as e:
                raise UsageError(f"--alpha must be 'auto' or a number, got {alpha!r}") from e
        overrides["alpha"] = alpha
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gram(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest = store.read_manifest(manifest_path)
    act_dir = Path(args.activations)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_rows: dict[str, int] = {}
    new_layers = []
    for e in manifest.layers:
        pattern = os.path.join(glob.escape(str(act_dir)), glob.escape(e.name) + ".act*.tensor")
        shards = sorted(glob.glob(pattern))
        if not shards:
            raise WhittleError(f"layer {e.name}: no activation dumps match {pattern}")
        gram = np.zeros((e.d1, e.d1))
        rows = 0
        for shard in shards:
            X = store.read_tensor(shard)
            if X.ndim != 2 or X.shape[1] != e.d1:
                raise WhittleError(
                    f"layer {e.name}: dump {shard} has shape {X.shape}, expected (*, {e.d1})"
                )
            gram += X.T @ X
            rows += X.shape[0]
        gram_ref = f"{e.name}.gram.tensor"
        store.write_tensor(out_dir / gram_ref, gram)
        n_rows[e.name] = rows
        weight_ref = os.path.relpath(manifest_path.parent / e.weight_ref, out_dir)
        new_layers.append(
            store.LayerEntry(name=e.name, d1=e.d1, d2=e.d2, weight_ref=weight_ref, gram_ref=gram_ref)
        )
    (out_dir / "gram_meta.json").write_text(json.dumps({"n_rows": n_rows}, indent=2) + "\n")
    store.write_manifest(
        store.ModelManifest(format_version=manifest.format_version, layers=new_layers),
        out_dir / "manifest.json",
    )
    print(f"wrote {len(new_layers)} gram matrices to {out_dir}")
    return 0


def _build_whiteners(model: store.LoadedModel) -> dict:
    whiteners = {}
    for e in model.manifest.layers:
        if e.name not in model.grams:
            raise WhittleError(f"layer {e.name}: manifest has no gram reference")
        whiteners[e.name] = build_whitener(model.grams[e.name], name=e.name)
    return whiteners


def cmd_profile(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    model = store.load_model(args.manifest)
    whiteners = _build_whiteners(model)
    grid = cfg.grid()
    option_sets = []
    for e in model.manifest.layers:
        option_sets.append(
            profiler.profile_layer(
                model.weights[e.name],
                whiteners[e.name],
                grid,
                mode=cfg.sparsify_mode,
                layer_name=e.name,
            )
        )
    profiler.write_options(args.out, option_sets, grid, cfg.sparsify_mode)
    n_candidates = len(grid.rank_fracs) * len(grid.ks_fracs)
    print(f"profiled {len(option_sets)} layers ({n_candidates} grid candidates each) -> {args.out}")
    return 0


def cmd_allocate(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    option_sets, grid, mode = profiler.read_options(args.options)
    total = sum(os_.d1 * os_.d2 for os_ in option_sets)
    budget = int((1.0 - cfg.target_cr) * total)
    e_ref = profiler.reference_error(option_sets, cfg.target_cr)
    inst = allocator.MckpInstance(
        layers=option_sets,
        budget_kept=budget,
        alpha=cfg.alpha,
        e_ref=e_ref,
        param_precision=cfg.param_precision,
    )
    plan = allocator.solve_dp(inst)
    print(f"{'layer':<24}{'k':>6}{'s':>6}{'cost':>12}{'error':>14}")
    for os_, idx in zip(option_sets, plan.choices):
        o = os_.options[idx]
        label = "dense" if o.is_identity else str(o.rank_k)
        print(f"{os_.layer_name:<24}{label:>6}{o.per_col_nnz_s:>6}{o.cost:>12}{o.error:>14.6f}")
    assert plan.total_kept <= budget
    print(
        f"total kept {plan.total_kept} / budget {budget} "
        f"(alpha={plan.alpha_used:.6g}, e_ref={e_ref:.6g}, total error {plan.total_error:.6g})"
    )
    meta = {
        "target_cr": cfg.target_cr,
        "lam": grid.lam,
        "beta_margin": grid.beta_margin,
        "mu": grid.mu,
        "error_metric": grid.error_metric,
        "sparsify_mode": mode,
    }
    allocator.write_plan(args.out, allocator.plan_to_json(plan, inst, meta))
    print(f"plan -> {args.out}")
    return 0


def cmd_compress(args: argparse.Namespace) -> int:
    plan_doc = allocator.read_plan(args.plan)
    model = store.load_model(args.manifest)
    plan_layers = plan_doc["layers"]
    manifest_names = [e.name for e in model.manifest.layers]
    if set(plan_layers) != set(manifest_names):
        missing = set(manifest_names) ^ set(plan_layers)
        raise WhittleError(f"plan and manifest disagree on layers: {sorted(missing)}")
    meta = plan_doc.get("pipeline", {})
    whiteners = _build_whiteners(model)
    factors: dict[str, object] = {}
    total_error = 0.0
    for e in model.manifest.layers:
        chosen = plan_layers[e.name]
        rank_k, s = int(chosen["rank_k"]), int(chosen["s"])
        if rank_k == 0:
            factors[e.name] = model.weights[e.name]
        else:
            f, report = profiler.factorize_candidate(
                model.weights[e.name],
                whiteners[e.name],
                rank_k,
                s,
                lam=float(meta.get("lam", 0.5)),
                beta_margin=float(meta.get("beta_margin", 5e-3)),
                mu=float(meta.get("mu", 0.0)),
                mode=meta.get("sparsify_mode", "column_two_stage"),
            )
            factors[e.name] = f
            total_error += report.get(meta.get("error_metric", "frobenius_rel"))
    plan = allocator.AllocationPlan(
        choices=[],
        total_kept=int(plan_doc["total_kept"]),
        total_error=float(plan_doc["total_error"]),
        alpha_used=float(plan_doc["alpha_used"]),
    )
    manifest_path = store.save_compressed(plan, factors, args.out)
    total = model.manifest.total_params
    achieved = 1.0 - plan.total_kept / total
    print(f"compressed model -> {manifest_path}")
    print(f"achieved compression ratio {achieved:.4f} (kept {plan.total_kept} of {total})")
    return 0


def _load_probes(args, manifest: store.ModelManifest) -> dict[str, np.ndarray]:
    probes = {}
    if getattr(args, "probe_dir", None):
        base = Path(args.probe_dir)
        for e in manifest.layers:
            path = base / f"{e.name}.probe.tensor"
            X = store.read_tensor(path)
            if X.ndim != 2 or X.shape[1] != e.d1:
                raise WhittleError(f"layer {e.name}: probe shape {X.shape} expected (*, {e.d1})")
            probes[e.name] = X
    else:
        rng = np.random.default_rng(getattr(args, "seed", 0) or 0)
        n = getattr(args, "probe_n", 0) or 32
        for e in manifest.layers:
            probes[e.name] = rng.standard_normal((n, e.d1))
    return probes


def cmd_eval(args: argparse.Namespace) -> int:
    model = store.load_model(args.manifest)
    compressed = store.load_compressed(args.compressed)
    comp_by_name = {rec.name: rec for rec in compressed.layers}
    missing = [e.name for e in model.manifest.layers if e.name not in comp_by_name]
    if missing:
        raise WhittleError(f"compressed model lacks layers {missing}")
    probes = _load_probes(args, model.manifest)
    rows = []
    total_flops = 0
    total_params = 0
    header = (
        f"{'layer':<24}{'fro_rel':>10}{'l1':>12}{'cos':>10}{'spectral':>10}"
        f"{'act_rel':>10}{'bound':>10}{'flops':>14}{'params':>10}"
    )
    print(header)
    for e in model.manifest.layers:
        rec = comp_by_name[e.name]
        W = model.weights[e.name]
        X = probes[e.name]
        if rec.kind == "dense":
            W_tilde = rec.W
            layer_rt = None
            flops = X.shape[0] * e.d1 * e.d2
            params = e.d1 * e.d2
            Y_tilde = X @ W_tilde
        else:
            layer_rt = runtime.CompressedLayer.from_parts(rec.U, rec.V)
            W_tilde = layer_rt.dense_weight()
            flops = runtime.flop_count(layer_rt, X.shape[0])
            params = runtime.param_count(layer_rt)
            Y_tilde = runtime.forward(layer_rt, X)
        report = error_report(W, W_tilde)
        Y = X @ W
        y_norm = float(np.linalg.norm(Y))
        act_rel = float(np.linalg.norm(Y - Y_tilde)) / y_norm if y_norm > 0 else 0.0
        bound = None
        if e.name in model.grams:
            t = build_whitener(model.grams[e.name], name=e.name)
            bound = report.frobenius_rel * float(np.linalg.cond(t.L))
        total_flops += flops
        total_params += params
        rows.append(
            {
                "layer": e.name,
                "kind": rec.kind,
                "frobenius_rel": report.frobenius_rel,
                "l1_abs": report.l1_abs,
                "mean_cos_cols": report.mean_cos_cols,
                "spectral_abs": report.spectral_abs,
                "activation_rel": act_rel,
                "activation_bound": bound,
                "flops": flops,
                "params": params,
            }
        )
        bound_txt = f"{bound:>10.4f}" if bound is not None else f"{'-':>10}"
        print(
            f"{e.name:<24}{report.frobenius_rel:>10.6f}{report.l1_abs:>12.4f}"
            f"{report.mean_cos_cols:>10.6f}{report.spectral_abs:>10.4f}"
            f"{act_rel:>10.6f}{bound_txt}{flops:>14}{params:>10}"
        )
    print(f"total flops {total_flops}, total kept params {total_params}")
    doc = {
        "format_version": 1,
        "layers": rows,
        "total_flops": total_flops,
        "total_params": total_params,
    }
    out = getattr(args, "out", None) or str(Path(args.compressed) / "eval.json")
    Path(out).write_text(json.dumps(doc, indent=2) + "\n")
    print(f"report -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--cr", type=float, dest="cr", help="target compression ratio in [0, 1)")
    p.add_argument("--rank-grid", dest="rank_grid", help="comma-separated rank fractions")
    p.add_argument("--ks-grid", dest="ks_grid", help="comma-separated sparsity fractions")
    p.add_argument("--lambda", type=float, dest="lam", help="importance balance in [0, 1]")
    p.add_argument("--beta", type=float, dest="beta", help="stage-1 over-sparsify margin")
    p.add_argument("--mu", type=float, dest="mu", help="ridge weight for the dictionary refit")
    p.add_argument("--param-precision", type=int, dest="param_precision")
    p.add_argument("--error-metric", dest="error_metric", choices=METRICS)
    p.add_argument("--mode", dest="mode", choices=MODES)
    p.add_argument("--alpha", dest="alpha", help="'auto' or a nonnegative cap multiplier")
    p.add_argument("--seed", type=int, dest="seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="whittle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gram", help="accumulate per-layer Gram matrices from activation dumps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--activations", required=True, help="directory of <layer>.act*.tensor dumps")
    p.add_argument("--out", required=True, help="output directory for grams + updated manifest")
    p.set_defaults(func=cmd_gram)

    p = sub.add_parser("profile", help="evaluate the per-layer candidate grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="options JSON path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("allocate", help="solve the budget allocation over profiled options")
    p.add_argument("--options", required=True, help="options JSON from the profile step")
    p.add_argument("--out", required=True, help="plan JSON path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("compress", help="regenerate chosen factorizations and write the model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True, help="plan JSON from the allocate step")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="compare a compressed model against the original")
    p.add_argument("--manifest", required=True)
    p.add_argument("--compressed", required=True, help="compressed model directory")
    p.add_argument("--probe-dir", dest="probe_dir", help="directory of <layer>.probe.tensor inputs")
    p.add_argument("--probe-n", type=int, dest="probe_n", help="rows of generated probes (default 32)")
    p.add_argument("--seed", type=int, dest="seed", default=0)
    p.add_argument("--out", help="report JSON path (default <compressed>/eval.json)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except WhittleError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
