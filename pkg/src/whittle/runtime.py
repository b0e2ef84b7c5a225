"""Factorized forward pass with column-sparse coefficients, plus the
parameter and multiply-add accounting that goes with it.

The product is computed as a dense ``H = X @ U`` followed by a per-column
gather-and-dot against the CSC arrays. ``H`` is formed over all k columns
even when some dictionary atoms are inactive; the FLOP model still reports
the active-atom figure, since the accounting (not kernel optimality) is what
this module guarantees. ``forward`` is pure and reentrant; layers can be
evaluated concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import SparseColumns


@dataclass
class CompressedLayer:
    U: np.ndarray  # d1 x k dense
    V: SparseColumns  # k x d2 column-sparse
    k_active: int

    @classmethod
    def from_parts(cls, U: np.ndarray, V: SparseColumns) -> "CompressedLayer":
        U = np.asarray(U, dtype=np.float64)
        if U.ndim != 2 or U.shape[1] != V.k:
            raise ValueError(f"U is {U.shape} but V has k={V.k} rows")
        return cls(U=U, V=V, k_active=V.k_active)

    @classmethod
    def from_factorization(cls, f) -> "CompressedLayer":
        mask = getattr(f, "mask", None)
        if mask is not None:
            V = SparseColumns.from_mask(mask, f.C_sparse)
        else:
            V = SparseColumns.from_dense(f.C_sparse)
        return cls.from_parts(f.U, V)

    def dense_weight(self) -> np.ndarray:
        return self.U @ self.V.to_dense()


def forward(layer: CompressedLayer, X: np.ndarray) -> np.ndarray:
    """Compute ``X @ U @ V`` without materializing the dense product."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != layer.U.shape[0]:
        raise ValueError(f"input is {X.shape} but U has d1={layer.U.shape[0]}")
    H = X @ layer.U
    V = layer.V
    out = np.zeros((X.shape[0], V.d2), dtype=np.float64)
    ptr = V.col_ptr.astype(np.int64)
    for j in range(V.d2):
        sl = slice(ptr[j], ptr[j + 1])
        if sl.start != sl.stop:
            out[:, j] = H[:, V.row_idx[sl]] @ V.values[sl]
    return out


def flop_count(layer: CompressedLayer, n_rows: int) -> int:
    """Multiply-add count for a batch of ``n_rows`` inputs.

    ``n_rows * d1 * k_active`` for the dense factor (assuming only active
    atoms are materialized) plus ``n_rows * nnz(V)`` for the sparse one.
    """
    d1 = layer.U.shape[0]
    return n_rows * d1 * layer.k_active + n_rows * layer.V.nnz


def param_count(layer: CompressedLayer) -> int:
    return layer.U.shape[0] * layer.U.shape[1] + layer.V.nnz
