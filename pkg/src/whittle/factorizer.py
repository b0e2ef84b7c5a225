"""Data-adaptive orthonormal basis of the whitened weight, its coefficients,
and the truncated-SVD oracle used to cross-check both.

The basis comes from an eigendecomposition of the d1 x d1 symmetric PSD
matrix ``W_L W_L^T``, which coincides with the left singular vectors of
``W_L`` (eigenvalues are squared singular values). The SVD route is kept as
an independent oracle rather than the production path.

Pure and reentrant; per-layer and per-candidate calls can run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass
class EigenBasis:
    """Column-orthonormal basis B (d1 x r) with nonincreasing eigenvalues."""

    B: np.ndarray
    eigvals: np.ndarray


@dataclass
class CoeffMatrix:
    """Projection coefficients C = B^T W_L (r x d2)."""

    C: np.ndarray


def _canonicalize_signs(B: np.ndarray) -> np.ndarray:
    # deterministic sign: the largest-magnitude entry of each column is positive
    idx = np.argmax(np.abs(B), axis=0)
    flip = B[idx, np.arange(B.shape[1])] < 0
    B = B.copy()
    B[:, flip] *= -1.0
    return B


def top_r_basis(W_L: np.ndarray, r: int) -> EigenBasis:
    """Top-r eigenvectors of ``W_L W_L^T``, signs canonicalized.

    Rounding can push tiny eigenvalues slightly negative; they are clamped
    to 0 since the matrix is PSD by construction.
    """
    W_L = np.asarray(W_L, dtype=np.float64)
    d1 = W_L.shape[0]
    if not 1 <= r <= d1:
        raise ValueError(f"rank r={r} out of range for d1={d1}")
    S = W_L @ W_L.T
    S = (S + S.T) / 2.0
    try:
        w, V = np.linalg.eigh(S)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition failed: {e}") from e
    order = np.argsort(w, kind="stable")[::-1][:r]
    eigvals = np.maximum(w[order], 0.0)
    B = _canonicalize_signs(V[:, order])
    return EigenBasis(B=B, eigvals=eigvals)


def coefficients(basis: EigenBasis, W_L: np.ndarray) -> CoeffMatrix:
    """Orthogonal projection of the whitened weight onto the basis."""
    W_L = np.asarray(W_L, dtype=np.float64)
    if basis.B.shape[0] != W_L.shape[0]:
        raise ValueError(
            f"dim mismatch: basis is {basis.B.shape}, W_L is {W_L.shape}"
        )
    return CoeffMatrix(C=basis.B.T @ W_L)


def truncated_svd_oracle(
    W: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Best rank-k approximation factors and the exact residual norm.

    Returns ``(U_k, sigma_k, Vt_k, residual)`` with
    ``residual = sqrt(sum of squared singular values beyond k)``. Used by
    tests and as the dense-coefficient degenerate check of the pipeline.
    """
    W = np.asarray(W, dtype=np.float64)
    if not 1 <= k <= min(W.shape):
        raise ValueError(f"k={k} out of range for shape {W.shape}")
    try:
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"SVD failed: {e}") from e
    residual = float(np.sqrt(np.sum(s[k:] ** 2)))
    return U[:, :k], s[:k], Vt[:k, :], residual
