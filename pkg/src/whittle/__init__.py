"""whittle: training-free weight compression.

Factorizes each layer of a model into a dense dictionary times a
column-sparse coefficient matrix in a calibration-whitened space, then
allocates a global parameter budget across layers by solving a constrained
multi-choice knapsack exactly.
"""

from .allocator import (
    AllocationPlan,
    MckpInstance,
    brute_force_oracle,
    dijkstra_oracle,
    min_feasible_alpha,
    solve_dp,
)
from .errors import InfeasibleError, NumericalError, StoreError, UsageError, WhittleError
from .factorizer import CoeffMatrix, EigenBasis, coefficients, top_r_basis, truncated_svd_oracle
from .profiler import (
    CandidateGrid,
    CompressionOption,
    OptionSet,
    factorize_candidate,
    profile_layer,
    reference_error,
)
from .refit import ErrorReport, SparseFactorization, error_report, reconstruct, ridge_refit
from .runtime import CompressedLayer, flop_count, forward
from .sparsifier import ImportanceMatrix, SparsityMask, importance, sparsify_mode, two_stage_sparsify
from .store import LoadedModel, ModelManifest, SparseColumns, load_compressed, load_model, save_compressed
from .whitening import WhitenTransform, build_whitener, unwhiten, whiten_weight

__version__ = "0.1.0"

__all__ = [
    "AllocationPlan",
    "CandidateGrid",
    "CoeffMatrix",
    "CompressedLayer",
    "CompressionOption",
    "EigenBasis",
    "ErrorReport",
    "ImportanceMatrix",
    "InfeasibleError",
    "LoadedModel",
    "MckpInstance",
    "ModelManifest",
    "NumericalError",
    "OptionSet",
    "SparseColumns",
    "SparseFactorization",
    "SparsityMask",
    "StoreError",
    "UsageError",
    "WhitenTransform",
    "WhittleError",
    "brute_force_oracle",
    "build_whitener",
    "coefficients",
    "dijkstra_oracle",
    "error_report",
    "factorize_candidate",
    "flop_count",
    "forward",
    "importance",
    "load_compressed",
    "load_model",
    "min_feasible_alpha",
    "profile_layer",
    "reconstruct",
    "reference_error",
    "ridge_refit",
    "save_compressed",
    "solve_dp",
    "sparsify_mode",
    "top_r_basis",
    "truncated_svd_oracle",
    "two_stage_sparsify",
    "unwhiten",
    "whiten_weight",
]
