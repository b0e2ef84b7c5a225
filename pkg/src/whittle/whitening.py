"""Calibration whitening: factor the activation Gram and map weights into
(and back out of) the whitened space.

The convention is fixed throughout the toolkit: for a Gram matrix
``A = X^T X`` we factor ``A + jitter*I = L^T L`` with ``L`` upper
triangular, so the decorrelated activations ``Y = X L^{-1}`` satisfy
``Y^T Y = I``. Every downstream module relies on this orientation.

All functions are pure over immutable inputs; transforms are read-only
values that may be shared freely across threads, and distinct layers can be
whitened in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NumericalError

DEFAULT_JITTER_REL = 1e-6


@dataclass(frozen=True)
class WhitenTransform:
    """Upper-triangular factor of a regularized Gram matrix, with its inverse.

    ``jitter_used`` is the absolute value added to the Gram diagonal before
    factorization (0 when no regularization was needed or requested).
    """

    L: np.ndarray
    L_inv: np.ndarray
    jitter_used: float


def _check_symmetric(gram: np.ndarray, name: str) -> None:
    denom = max(float(np.linalg.norm(gram)), np.finfo(np.float64).tiny)
    if float(np.linalg.norm(gram - gram.T)) / denom > 1e-8:
        raise NumericalError(f"layer {name or '<anon>'}: gram matrix is not symmetric")


def build_whitener(
    gram: np.ndarray, jitter_rel: float = DEFAULT_JITTER_REL, name: str = ""
) -> WhitenTransform:
    """Factor ``gram + jitter*I = L^T L`` with jitter relative to mean(diag).

    The jitter escalates through {jitter_rel, 10x, 100x} before giving up.
    Rank-deficient Grams are routine whenever the calibration set is small or
    correlated, so a nonzero default jitter keeps the factorization alive.
    """
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise NumericalError(f"layer {name or '<anon>'}: gram must be square")
    if jitter_rel < 0:
        raise ValueError("jitter_rel must be nonnegative")
    _check_symmetric(gram, name)
    A = (gram + gram.T) / 2.0
    d1 = A.shape[0]
    base = float(jitter_rel) * float(np.mean(np.diag(A)))
    jitters = [base] if base == 0.0 else [base, 10.0 * base, 100.0 * base]
    for jitter in jitters:
        try:
            L = scipy.linalg.cholesky(A + jitter * np.eye(d1), lower=False)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
            continue
        L_inv = scipy.linalg.solve_triangular(L, np.eye(d1), lower=False)
        return WhitenTransform(L=L, L_inv=L_inv, jitter_used=float(jitter))
    raise NumericalError(
        f"layer {name or '<anon>'}: cholesky failed even after escalating jitter "
        f"through {jitters}"
    )


def whiten_weight(t: WhitenTransform, W: np.ndarray) -> np.ndarray:
    """Map a weight matrix into the whitened space: ``W_L = L W``."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] != t.L.shape[0]:
        raise ValueError(f"dim mismatch: L is {t.L.shape}, W is {W.shape}")
    return t.L @ W


def unwhiten(t: WhitenTransform, M: np.ndarray) -> np.ndarray:
    """Map back to the original space via an exact triangular solve.

    This is the reconstruction path, so it avoids the explicit inverse;
    ``L_inv`` is materialized on the transform only for importance weights.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.shape[0] != t.L.shape[0]:
        raise ValueError(f"dim mismatch: L is {t.L.shape}, M is {M.shape}")
    return scipy.linalg.solve_triangular(t.L, M, lower=False)
