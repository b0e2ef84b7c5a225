"""Checkpoint-to-manifest export: weight extraction, calibration activation
capture via forward hooks, and float64 Gram accumulation.

The core tool always sees weights as input-dim x output-dim, so 2-D
projection weights stored in the framework's output x input layout are
transposed at export time. Embeddings and the output head are excluded by
the default patterns; they stay uncompressed.
"""

from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats

DEFAULT_INCLUDE = (
    "*q_proj*",
    "*k_proj*",
    "*v_proj*",
    "*o_proj*",
    "*gate_proj*",
    "*up_proj*",
    "*down_proj*",
)
DEFAULT_EXCLUDE = ("*embed*", "*lm_head*")


class ExportError(RuntimeError):
    pass


@dataclass
class ExportRecipe:
    checkpoint: str | Path
    out_dir: str | Path
    include: tuple[str, ...] = DEFAULT_INCLUDE
    exclude: tuple[str, ...] = DEFAULT_EXCLUDE
    sample_count: int = 256
    batch_size: int = 16
    dump_activations: bool = False

    def __post_init__(self):
        if self.sample_count < 1:
            raise ExportError("sample_count must be >= 1")
        if not self.include:
            raise ExportError("include patterns must be nonempty")

    def matches(self, name: str) -> bool:
        if any(fnmatch.fnmatchcase(name, pat) for pat in self.exclude):
            return False
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.include)


def _load_state_dict(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ExportError(f"unreadable checkpoint {path}")
    try:
        obj = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ExportError(f"cannot load checkpoint {path}: {e}") from e
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise ExportError(f"checkpoint {path} does not hold a state dict")
    return obj


def export_weights(recipe: ExportRecipe) -> Path:
    """Write matched 2-D weights (transposed to d1 x d2) plus the manifest.

    Returns the manifest path. Weights are stored as float32; the core
    loads everything as float64, so the round trip is exact at 32-bit
    precision.
    """
    state = _load_state_dict(recipe.checkpoint)
    out_dir = Path(recipe.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for key, value in state.items():
        if not key.endswith(".weight") or not isinstance(value, torch.Tensor):
            continue
        if value.ndim != 2:
            continue
        name = key[: -len(".weight")]
        if not recipe.matches(name):
            continue
        # framework layout is output x input; the tool wants input x output
        W = value.detach().to(torch.float32).t().contiguous().numpy()
        weight_ref = f"{name}.weight.tensor"
        formats.write_tensor(out_dir / weight_ref, W, formats.DTYPE_F32)
        entries.append(
            {"name": name, "d1": W.shape[0], "d2": W.shape[1], "weight_ref": weight_ref}
        )
    if not entries:
        raise ExportError("no layers matched the include/exclude patterns")
    manifest_path = out_dir / "manifest.json"
    formats.write_manifest(entries, manifest_path)
    return manifest_path


class _GramHook:
    """Forward pre-hook accumulating X^T X in float64 for one module."""

    def __init__(self, name: str, d1: int, dump: bool):
        self.name = name
        self.d1 = d1
        self.gram = np.zeros((d1, d1))
        self.n_rows = 0
        self.dump = dump
        self.batches: list[np.ndarray] = []

    def __call__(self, module, inputs):
        x = inputs[0]
        if x.shape[-1] != self.d1:
            raise ExportError(
                f"layer {self.name}: activation width {x.shape[-1]} drifted from {self.d1}"
            )
        flat = x.detach().reshape(-1, self.d1).to(torch.float64).numpy()
        self.gram += flat.T @ flat
        self.n_rows += flat.shape[0]
        if self.dump:
            self.batches.append(flat)


def export_grams(
    recipe: ExportRecipe, model: torch.nn.Module, samples: torch.Tensor
) -> Path:
    """Run calibration samples through the model, accumulate per-layer input
    Grams, and rewrite the manifest with gram references attached.

    Requires ``export_weights`` to have populated ``recipe.out_dir`` first so
    the layer set and dims are pinned. With ``dump_activations`` the raw
    per-batch inputs are also written as ``<layer>.act<i>.tensor`` shards.
    """
    out_dir = Path(recipe.out_dir)
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.is_file():
        raise ExportError(f"{manifest_path} missing; run export_weights first")
    entries = formats.read_manifest(manifest_path)
    modules = dict(model.named_modules())
    hooks: dict[str, _GramHook] = {}
    handles = []
    try:
        for e in entries:
            mod = modules.get(e["name"])
            if mod is None:
                raise ExportError(f"layer {e['name']}: no matching module in the model")
            hook = _GramHook(e["name"], e["d1"], recipe.dump_activations)
            hooks[e["name"]] = hook
            handles.append(mod.register_forward_pre_hook(hook))
        n = min(recipe.sample_count, len(samples))
        model.eval()
        with torch.no_grad():
            for start in range(0, n, recipe.batch_size):
                model(samples[start : start + recipe.batch_size])
    finally:
        for h in handles:
            h.remove()
    meta = {}
    for e in entries:
        hook = hooks[e["name"]]
        if hook.n_rows == 0:
            raise ExportError(f"layer {e['name']}: no activations captured")
        gram_ref = f"{e['name']}.gram.tensor"
        formats.write_tensor(out_dir / gram_ref, hook.gram, formats.DTYPE_F64)
        e["gram_ref"] = gram_ref
        meta[e["name"]] = hook.n_rows
        if recipe.dump_activations:
            for i, batch in enumerate(hook.batches):
                formats.write_tensor(out_dir / f"{e['name']}.act{i:04d}.tensor", batch)
    formats.write_manifest(entries, manifest_path)
    (out_dir / "gram_meta.json").write_text(json.dumps({"n_rows": meta}, indent=2) + "\n")
    return manifest_path
