"""Synthetic model generation for tests, demos, and benchmarking the
pipeline at desk scale."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import store

DEFAULT_DIMS = (
    (32, 64),
    (48, 96),
    (64, 64),
    (64, 96),
    (96, 64),
    (96, 96),
    (128, 96),
    (80, 72),
)


def make_synthetic_model(
    out_dir: str | Path,
    dims: tuple[tuple[int, int], ...] = DEFAULT_DIMS,
    n_calib: int = 256,
    seed: int = 0,
    with_grams: bool = True,
    activation_shards: int = 0,
) -> Path:
    """Write a random layered model and return its manifest path.

    Weights and calibration activations are standard normal. When
    ``activation_shards`` > 0 the raw activation dumps are also written
    (split into that many shards) so the Gram-building command can be fed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    layers = []
    for i, (d1, d2) in enumerate(dims):
        name = f"layer{i}"
        W = rng.standard_normal((d1, d2))
        weight_ref = f"{name}.weight.tensor"
        store.write_tensor(out_dir / weight_ref, W)
        gram_ref = None
        X = rng.standard_normal((n_calib, d1))
        if with_grams:
            gram_ref = f"{name}.gram.tensor"
            store.write_tensor(out_dir / gram_ref, X.T @ X)
        if activation_shards > 0:
            for si, shard in enumerate(np.array_split(X, activation_shards)):
                store.write_tensor(out_dir / f"{name}.act{si}.tensor", shard)
        layers.append(
            store.LayerEntry(name=name, d1=d1, d2=d2, weight_ref=weight_ref, gram_ref=gram_ref)
        )
    manifest = store.ModelManifest(format_version=1, layers=layers)
    manifest_path = out_dir / "manifest.json"
    store.write_manifest(manifest, manifest_path)
    return manifest_path
