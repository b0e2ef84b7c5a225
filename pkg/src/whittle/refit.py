"""Closed-form dictionary refit, reconstruction, and error metrics.

Once the sparsity pattern of the coefficients is frozen there is no reason to
keep the left factor orthonormal, so the dictionary is re-solved as a
ridge-regularized least-squares problem against the k x k normal matrix (the
cheap side). Iterative alternating updates are deliberately out of scope: the
whole point of this factorization is that a single closed-form solve is
enough.

Pure functions; candidates can be refit in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import NumericalError
from .whitening import WhitenTransform, unwhiten

METRICS = ("frobenius_rel", "l1_abs", "mean_cos_cols", "spectral_abs")


@dataclass
class SparseFactorization:
    """Dense dictionary with column-sparse coefficients.

    ``D`` lives in the whitened space; ``U = unwhiten(D)`` is the merged
    left factor used at inference time. ``mask`` records the coefficient
    support explicitly, so entries whose value happens to be exactly zero
    still count toward the stored size. ``mu`` is the ridge weight actually
    used by the solve (it may have been escalated).
    """

    D: np.ndarray
    C_sparse: np.ndarray
    U: np.ndarray
    mu: float
    mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def nnz(self) -> int:
        if self.mask is not None:
            return int(self.mask.sum())
        return int(np.count_nonzero(self.C_sparse))


@dataclass
class ErrorReport:
    frobenius_rel: float
    l1_abs: float
    mean_cos_cols: float
    spectral_abs: float

    def get(self, metric: str) -> float:
        if metric not in METRICS:
            raise ValueError(f"unknown error metric {metric!r}")
        return float(getattr(self, metric))


def ridge_refit(
    W_L: np.ndarray, C_sparse: np.ndarray, mu: float = 0.0
) -> tuple[np.ndarray, float]:
    """Solve ``min_D ||W_L - D C_s||_F^2 + mu ||D||_F^2`` in closed form.

    Returns ``(D, mu_used)``. The normal matrix ``C_s C_s^T + mu I`` is
    factored as SPD; when mu = 0 leaves it singular (inactive rows of C_s are
    the usual cause) mu escalates once to ``1e-10 * trace / k`` and the value
    actually used is reported back.
    """
    W_L = np.asarray(W_L, dtype=np.float64)
    C_sparse = np.asarray(C_sparse, dtype=np.float64)
    if W_L.shape[1] != C_sparse.shape[1]:
        raise ValueError(
            f"dim mismatch: W_L is {W_L.shape}, C_sparse is {C_sparse.shape}"
        )
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    k = C_sparse.shape[0]
    G = C_sparse @ C_sparse.T
    G = (G + G.T) / 2.0
    trace = float(np.trace(G))
    if trace == 0.0:
        # all-zero coefficients: the optimum is the zero dictionary for any
        # positive ridge weight, so skip the (singular) solve entirely
        return np.zeros((W_L.shape[0], k)), float(mu)
    rhs = W_L @ C_sparse.T
    attempts = [float(mu)]
    escalated = float(mu) + 1e-10 * trace / k
    if escalated not in attempts:
        attempts.append(escalated)
    for mu_try in attempts:
        try:
            cf = scipy.linalg.cho_factor(G + mu_try * np.eye(k))
            D = scipy.linalg.cho_solve(cf, rhs.T).T
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(D)):
            return D, float(mu_try)
    raise NumericalError(
        f"ridge refit failed even after escalating mu to {attempts[-1]:g}"
    )


def refit_factorization(
    t: WhitenTransform,
    W_L: np.ndarray,
    C_sparse: np.ndarray,
    mu: float = 0.0,
    mask: np.ndarray | None = None,
) -> SparseFactorization:
    """Refit the dictionary and bundle the merged inference factors."""
    D, mu_used = ridge_refit(W_L, C_sparse, mu)
    return SparseFactorization(
        D=D, C_sparse=np.asarray(C_sparse, dtype=np.float64),
        U=unwhiten(t, D), mu=mu_used, mask=mask,
    )


def reconstruct(t: WhitenTransform, f: SparseFactorization) -> np.ndarray:
    """Original-space reconstruction from the merged factors, ``U @ C_sparse``."""
    if f.U.shape[0] != t.L.shape[0] or f.U.shape[1] != f.C_sparse.shape[0]:
        raise ValueError(
            f"dim mismatch: U is {f.U.shape}, C_sparse is {f.C_sparse.shape}"
        )
    return f.U @ f.C_sparse


def error_report(W: np.ndarray, W_tilde: np.ndarray) -> ErrorReport:
    """All four reconstruction-error metrics between a weight and its
    approximation.

    ``mean_cos_cols`` is the mean cosine distance (1 - cosine similarity)
    over columns; a column that is zero on exactly one side contributes 1,
    and one that is zero on both sides contributes 0.
    """
    W = np.asarray(W, dtype=np.float64)
    W_tilde = np.asarray(W_tilde, dtype=np.float64)
    if W.shape != W_tilde.shape:
        raise ValueError(f"dim mismatch: {W.shape} vs {W_tilde.shape}")
    w_norm = float(np.linalg.norm(W))
    if w_norm == 0.0:
        raise ValueError("reference weight has zero Frobenius norm")
    diff = W - W_tilde
    frobenius_rel = float(np.linalg.norm(diff)) / w_norm
    l1_abs = float(np.abs(diff).sum())
    spectral_abs = float(np.linalg.norm(diff, 2)) if diff.any() else 0.0
    col_w = np.linalg.norm(W, axis=0)
    col_t = np.linalg.norm(W_tilde, axis=0)
    both = (col_w > 0) & (col_t > 0)
    cos = np.zeros(W.shape[1])
    # 0.5 * ||u - v||^2 on unit columns equals 1 - cos(u, v) but is exactly
    # zero for identical columns and never dips below zero from rounding
    diff_unit = W[:, both] / col_w[both] - W_tilde[:, both] / col_t[both]
    cos[both] = 0.5 * np.einsum("ij,ij->j", diff_unit, diff_unit)
    cos[(col_w > 0) != (col_t > 0)] = 1.0
    return ErrorReport(
        frobenius_rel=frobenius_rel,
        l1_abs=l1_abs,
        mean_cos_cols=float(np.mean(cos)) if cos.size else 0.0,
        spectral_abs=spectral_abs,
    )
