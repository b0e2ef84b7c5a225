"""Fused importance scores and exact-count sparsification of the coefficient
matrix.

The main strategy is column-wise: keep the top-s entries of every column,
deliberately overshooting the sparsity by a small margin, then reactivate the
most important masked entries globally until the nonzero target is hit
exactly. Ablation variants (per-row, global, whitened-space-only importance)
share the same machinery.

Ties in importance always break by (row, column) lexicographic order so that
repeated runs are bitwise identical. All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .factorizer import CoeffMatrix, EigenBasis
from .whitening import WhitenTransform

DEFAULT_LAMBDA = 0.5
DEFAULT_BETA_MARGIN = 5e-3

MODES = ("column_two_stage", "per_row", "global", "whitened_only")


@dataclass
class ImportanceMatrix:
    """Entrywise importance ``imp = |C| * nu`` with per-row weights nu.

    ``nu[i]`` is the norm of the i-th basis direction mapped back to the
    original space, raised to the balance exponent ``lam``; lam = 0 scores
    purely in the whitened space, lam = 1 purely by original-space impact.
    """

    imp: np.ndarray
    nu: np.ndarray
    lam: float


@dataclass
class SparsityMask:
    mask: np.ndarray
    nnz: int


def _as_array(C) -> np.ndarray:
    return np.asarray(getattr(C, "C", C), dtype=np.float64)


def _as_imp(imp) -> np.ndarray:
    return np.asarray(getattr(imp, "imp", imp), dtype=np.float64)


def importance(
    C: CoeffMatrix | np.ndarray,
    basis: EigenBasis,
    t: WhitenTransform,
    lam: float = DEFAULT_LAMBDA,
) -> ImportanceMatrix:
    """Score each coefficient by |c_ij| * ||L^{-1} b_i||^lam."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    C = _as_array(C)
    if basis.B.shape[1] != C.shape[0]:
        raise ValueError(f"basis has {basis.B.shape[1]} columns, C has {C.shape[0]} rows")
    back = t.L_inv @ basis.B
    nu = np.linalg.norm(back, axis=0) ** lam
    return ImportanceMatrix(imp=np.abs(C) * nu[:, None], nu=nu, lam=float(lam))


def _stage1_count(target_nnz: int, n_entries: int, n_groups: int, beta_margin: float) -> int:
    margin = math.ceil(beta_margin * n_entries)
    return max(0, (target_nnz - margin) // n_groups)


def _global_order(imp: np.ndarray) -> np.ndarray:
    # stable sort on -imp: equal scores fall back to flat index, which is
    # exactly (row, column) lexicographic order for a C-contiguous matrix
    return np.argsort(-imp.ravel(), kind="stable")


def _reactivate(mask: np.ndarray, imp: np.ndarray, target_nnz: int) -> None:
    need = target_nnz - int(mask.sum())
    if need <= 0:
        return
    flat = mask.ravel()
    order = _global_order(imp)
    candidates = order[~flat[order]]
    flat[candidates[:need]] = True


def mode_mask(
    C: CoeffMatrix | np.ndarray,
    imp: ImportanceMatrix | np.ndarray,
    target_nnz: int,
    mode: str = "column_two_stage",
    beta_margin: float = DEFAULT_BETA_MARGIN,
) -> np.ndarray:
    """Support mask with exactly ``target_nnz`` True entries, per strategy."""
    C = _as_array(C)
    r, d2 = C.shape
    if not 0 <= target_nnz <= r * d2:
        raise ValueError(f"target_nnz={target_nnz} out of range for {r}x{d2}")
    if beta_margin < 0:
        raise ValueError("beta_margin must be nonnegative")
    if mode == "whitened_only":
        imp = np.abs(C)
    imp = _as_imp(imp)
    if imp.shape != C.shape:
        raise ValueError("importance matrix shape disagrees with C")
    mask = np.zeros((r, d2), dtype=bool)
    if mode in ("column_two_stage", "whitened_only"):
        s = _stage1_count(target_nnz, r * d2, d2, beta_margin)
        if s > 0:
            # ties within a column break toward smaller row
            order = np.argsort(-imp, axis=0, kind="stable")
            mask[order[:s, :], np.arange(d2)[None, :]] = True
    elif mode == "per_row":
        s = _stage1_count(target_nnz, r * d2, r, beta_margin)
        if s > 0:
            # ties within a row break toward smaller column
            order = np.argsort(-imp, axis=1, kind="stable")
            mask[np.arange(r)[:, None], order[:, :s]] = True
    elif mode == "global":
        pass  # the reactivation pass below does all the work
    else:
        raise ValueError(f"unknown sparsification mode {mode!r}")
    _reactivate(mask, imp, target_nnz)
    return mask


def two_stage_sparsify(
    C: CoeffMatrix | np.ndarray,
    imp: ImportanceMatrix | np.ndarray,
    target_nnz: int,
    beta_margin: float = DEFAULT_BETA_MARGIN,
) -> tuple[np.ndarray, SparsityMask]:
    """Column-wise top-s thresholding plus global reactivation.

    Stage 1 keeps a uniform per-column count s chosen so that roughly a
    ``beta_margin`` fraction of entries (plus the flooring remainder) is left
    for stage 2 to assign by global importance. Kept entries retain their
    values; the result has exactly ``target_nnz`` nonzero slots.
    """
    C = _as_array(C)
    mask = mode_mask(C, imp, target_nnz, "column_two_stage", beta_margin)
    return np.where(mask, C, 0.0), SparsityMask(mask=mask, nnz=int(mask.sum()))


def sparsify_mode(
    C: CoeffMatrix | np.ndarray,
    imp: ImportanceMatrix | np.ndarray,
    target_nnz: int,
    mode: str = "column_two_stage",
    beta_margin: float = DEFAULT_BETA_MARGIN,
) -> np.ndarray:
    """Sparse coefficient matrix under the chosen strategy (exact nnz)."""
    C = _as_array(C)
    mask = mode_mask(C, imp, target_nnz, mode, beta_margin)
    return np.where(mask, C, 0.0)
