"""Per-layer candidate profiling: run the factorize -> sparsify -> refit
chain over a (rank fraction, sparsity fraction) grid and record one
(cost, error) option per candidate.

Layers are independent and may be profiled concurrently; within a layer the
candidate loop is deterministic, so the resulting option sets are bitwise
reproducible and any chosen candidate can be regenerated later from its
(rank_k, per-column nnz) pair alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StoreError, WhittleError
from .factorizer import coefficients, top_r_basis
from .refit import METRICS, ErrorReport, SparseFactorization, error_report, refit_factorization
from .sparsifier import (
    DEFAULT_BETA_MARGIN,
    DEFAULT_LAMBDA,
    MODES,
    importance,
    mode_mask,
)
from .whitening import WhitenTransform, whiten_weight

DEFAULT_RANK_FRACS = tuple(round(0.1 * i, 2) for i in range(1, 11))
DEFAULT_KS_FRACS = (0.25, 0.5, 0.75, 1.0)


def round_half_up(x: float) -> int:
    """Deterministic rounding with .5 going up (no banker's rounding)."""
    return int(math.floor(x + 0.5))


@dataclass
class CandidateGrid:
    """The candidate grid plus the pipeline scalars shared by every candidate."""

    rank_fracs: tuple[float, ...] = DEFAULT_RANK_FRACS
    ks_fracs: tuple[float, ...] = DEFAULT_KS_FRACS
    lam: float = DEFAULT_LAMBDA
    beta_margin: float = DEFAULT_BETA_MARGIN
    mu: float = 0.0
    error_metric: str = "frobenius_rel"

    def __post_init__(self):
        self.rank_fracs = tuple(float(f) for f in self.rank_fracs)
        self.ks_fracs = tuple(float(f) for f in self.ks_fracs)
        for label, fracs in (("rank_fracs", self.rank_fracs), ("ks_fracs", self.ks_fracs)):
            if not fracs:
                raise ValueError(f"{label} must be nonempty")
            if any(not 0.0 < f <= 1.0 for f in fracs):
                raise ValueError(f"{label} must lie in (0, 1]")
            if any(b <= a for a, b in zip(fracs, fracs[1:])):
                raise ValueError(f"{label} must be strictly increasing")
        if 1.0 not in self.ks_fracs:
            # the dense-coefficient option must always exist so the plain
            # low-rank degenerate case stays a candidate
            raise ValueError("ks_fracs must include 1.0")
        if self.error_metric not in METRICS:
            raise ValueError(f"unknown error metric {self.error_metric!r}")


@dataclass(frozen=True)
class CompressionOption:
    """One profiled candidate: rank, per-column nnz, cost, and error.

    ``rank_k == 0`` marks the identity option (keep the layer dense), whose
    cost is exactly d1*d2 with error exactly 0.
    """

    rank_k: int
    per_col_nnz_s: int
    cost: int
    ks_ratio: float
    error: float

    @property
    def is_identity(self) -> bool:
        return self.rank_k == 0


def identity_option(d1: int, d2: int) -> CompressionOption:
    return CompressionOption(rank_k=0, per_col_nnz_s=0, cost=d1 * d2, ks_ratio=1.0, error=0.0)


@dataclass
class OptionSet:
    """All deduplicated options of one layer, sorted by cost ascending."""

    layer_name: str
    d1: int
    d2: int
    options: list[CompressionOption]


def candidate_dims(rank_frac: float, ks_frac: float, d1: int, d2: int) -> tuple[int, int, int]:
    """Realized (rank_k, per-column nnz, cost) for a grid point."""
    rank_k = max(1, round_half_up(rank_frac * min(d1, d2)))
    s = max(1, round_half_up(ks_frac * rank_k))
    cost = d1 * rank_k + s * d2
    return rank_k, s, cost


def factorize_candidate(
    W: np.ndarray,
    t: WhitenTransform,
    rank_k: int,
    per_col_nnz_s: int,
    *,
    lam: float = DEFAULT_LAMBDA,
    beta_margin: float = DEFAULT_BETA_MARGIN,
    mu: float = 0.0,
    mode: str = "column_two_stage",
) -> tuple[SparseFactorization, ErrorReport]:
    """Run the full chain for one (rank, sparsity) candidate.

    Deterministic: profiling and later compression regenerate identical
    factors from the same inputs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sparsification mode {mode!r}")
    W = np.asarray(W, dtype=np.float64)
    d2 = W.shape[1]
    W_L = whiten_weight(t, W)
    basis = top_r_basis(W_L, rank_k)
    C = coefficients(basis, W_L)
    imp = importance(C, basis, t, lam)
    target_nnz = per_col_nnz_s * d2
    mask = mode_mask(C.C, imp, target_nnz, mode, beta_margin)
    C_sparse = np.where(mask, C.C, 0.0)
    f = refit_factorization(t, W_L, C_sparse, mu, mask=mask)
    report = error_report(W, f.U @ f.C_sparse)
    return f, report


def profile_layer(
    W: np.ndarray,
    t: WhitenTransform,
    grid: CandidateGrid,
    *,
    mode: str = "column_two_stage",
    layer_name: str = "layer",
) -> OptionSet:
    """Evaluate the whole candidate grid for one layer.

    Candidates whose cost would not undercut the dense layer are replaced by
    the identity option, which is always present (keeping a layer dense can
    beat decomposing it, and it guarantees a feasible allocation for any
    budget up to the full model).
    """
    W = np.asarray(W, dtype=np.float64)
    d1, d2 = W.shape
    dense_cost = d1 * d2
    candidates: list[CompressionOption] = [identity_option(d1, d2)]
    for rank_frac in grid.rank_fracs:
        for ks_frac in grid.ks_fracs:
            rank_k, s, cost = candidate_dims(rank_frac, ks_frac, d1, d2)
            if cost >= dense_cost:
                continue  # replaced by the identity option
            try:
                f, report = factorize_candidate(
                    W,
                    t,
                    rank_k,
                    s,
                    lam=grid.lam,
                    beta_margin=grid.beta_margin,
                    mu=grid.mu,
                    mode=mode,
                )
            except WhittleError as e:
                raise type(e)(
                    f"layer {layer_name}, candidate (rank={rank_k}, s={s}): {e}"
                ) from e
            if f.nnz != s * d2:
                raise WhittleError(
                    f"layer {layer_name}: candidate (rank={rank_k}, s={s}) produced "
                    f"{f.nnz} nonzeros instead of {s * d2}"
                )
            candidates.append(
                CompressionOption(
                    rank_k=rank_k,
                    per_col_nnz_s=s,
                    cost=cost,
                    ks_ratio=s / rank_k,
                    error=report.get(grid.error_metric),
                )
            )
    # dedup by cost keeping the lowest error, then canonical cost order
    candidates.sort(key=lambda o: (o.cost, o.error, o.rank_k, o.per_col_nnz_s))
    options: list[CompressionOption] = []
    for opt in candidates:
        if options and options[-1].cost == opt.cost:
            continue
        options.append(opt)
    return OptionSet(layer_name=layer_name, d1=d1, d2=d2, options=options)


def uniform_selection(option_sets: list[OptionSet], target_cr: float) -> list[int]:
    """Per-layer option index whose cost is closest to the uniform share.

    The share is ``(1 - target_cr) * d1 * d2``; ties go to the cheaper
    option.
    """
    choices = []
    for os_ in option_sets:
        if not os_.options:
            raise WhittleError(f"layer {os_.layer_name}: empty option set")
        share = (1.0 - target_cr) * os_.d1 * os_.d2
        best = min(
            range(len(os_.options)),
            key=lambda i: (abs(os_.options[i].cost - share), os_.options[i].cost),
        )
        choices.append(best)
    return choices


def reference_error(option_sets: list[OptionSet], target_cr: float) -> float:
    """Mean error across layers when each is compressed at the uniform share."""
    choices = uniform_selection(option_sets, target_cr)
    errs = [os_.options[i].error for os_, i in zip(option_sets, choices)]
    return float(np.mean(errs))


# ---------------------------------------------------------------------------
# JSON interchange with the allocator stage


def options_to_json(
    option_sets: list[OptionSet],
    grid: CandidateGrid,
    mode: str = "column_two_stage",
) -> dict:
    return {
        "format_version": 1,
        "error_metric": grid.error_metric,
        "sparsify_mode": mode,
        "grid": {
            "rank_fracs": list(grid.rank_fracs),
            "ks_fracs": list(grid.ks_fracs),
            "lam": grid.lam,
            "beta_margin": grid.beta_margin,
            "mu": grid.mu,
        },
        "layers": [
            {
                "name": os_.layer_name,
                "d1": os_.d1,
                "d2": os_.d2,
                "options": [
                    {
                        "rank_k": o.rank_k,
                        "s": o.per_col_nnz_s,
                        "cost": o.cost,
                        "ks_ratio": o.ks_ratio,
                        "error": o.error,
                    }
                    for o in os_.options
                ],
            }
            for os_ in option_sets
        ],
    }


def options_from_json(doc: dict) -> tuple[list[OptionSet], CandidateGrid, str]:
    try:
        grid = CandidateGrid(
            rank_fracs=tuple(doc["grid"]["rank_fracs"]),
            ks_fracs=tuple(doc["grid"]["ks_fracs"]),
            lam=float(doc["grid"]["lam"]),
            beta_margin=float(doc["grid"]["beta_margin"]),
            mu=float(doc["grid"]["mu"]),
            error_metric=doc["error_metric"],
        )
        mode = doc.get("sparsify_mode", "column_two_stage")
        option_sets = [
            OptionSet(
                layer_name=raw["name"],
                d1=int(raw["d1"]),
                d2=int(raw["d2"]),
                options=[
                    CompressionOption(
                        rank_k=int(o["rank_k"]),
                        per_col_nnz_s=int(o["s"]),
                        cost=int(o["cost"]),
                        ks_ratio=float(o["ks_ratio"]),
                        error=float(o["error"]),
                    )
                    for o in raw["options"]
                ],
            )
            for raw in doc["layers"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise StoreError(f"malformed options document: {e}") from e
    return option_sets, grid, mode


def write_options(path: str | Path, option_sets, grid, mode="column_two_stage") -> None:
    Path(path).write_text(json.dumps(options_to_json(option_sets, grid, mode), indent=2) + "\n")


def read_options(path: str | Path) -> tuple[list[OptionSet], CandidateGrid, str]:
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"missing options file {path}")
    return options_from_json(json.loads(path.read_text()))
