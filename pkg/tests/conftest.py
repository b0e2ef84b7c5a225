import math

import numpy as np
import pytest

from whittle.allocator import MckpInstance, p_total
from whittle.errors import InfeasibleError
from whittle.profiler import CompressionOption, OptionSet
from whittle.whitening import build_whitener


def random_whitener(rng, d1, n=None, jitter_rel=0.0):
    """Whitening transform from a well-conditioned random calibration Gram."""
    n = n or 8 * d1
    X = rng.standard_normal((n, d1))
    return build_whitener(X.T @ X, jitter_rel=jitter_rel)


def random_layer(rng, d1, d2, n=None):
    """(W, transform) pair with standard-normal weight and calibration."""
    W = rng.standard_normal((d1, d2))
    return W, random_whitener(rng, d1, n)


def random_mckp_instance(rng, max_layers=6, max_options=5, cost_hi=200, alpha="auto"):
    """Feasible random instance (budget at least the sum of cheapest options)."""
    n_layers = int(rng.integers(1, max_layers + 1))
    layers = []
    lo_sum = hi_sum = 0
    for i in range(n_layers):
        n_opt = int(rng.integers(1, max_options + 1))
        costs = sorted(set(int(c) for c in rng.integers(1, cost_hi, size=n_opt)))
        opts = [
            CompressionOption(rank_k=1, per_col_nnz_s=1, cost=c, ks_ratio=1.0, error=float(rng.random()))
            for c in costs
        ]
        layers.append(OptionSet(layer_name=f"l{i}", d1=1, d2=costs[-1], options=opts))
        lo_sum += costs[0]
        hi_sum += costs[-1]
    budget = int(rng.integers(lo_sum, hi_sum + 1))
    errors = [o.error for os_ in layers for o in os_.options]
    inst = MckpInstance(
        layers=layers,
        budget_kept=budget,
        alpha=alpha,
        e_ref=float(np.mean(errors)),
        param_precision=1,
    )
    inst.param_precision = p_total(inst)  # exact-scaling regime by default
    return inst


def alpha_scan(inst):
    """Exhaustive scan over the candidate cap-ratio set (oracle for the
    binary search)."""
    ratios = set()
    for os_ in inst.layers:
        for o in os_.options:
            if o.error <= 0:
                ratios.add(0.0)
            elif inst.e_ref > 0:
                ratios.add(o.error / inst.e_ref)
            else:
                ratios.add(math.inf)
    for alpha in sorted(ratios) + [math.inf]:
        cap = math.inf if math.isinf(alpha) else alpha * inst.e_ref
        total = 0
        ok = True
        for os_ in inst.layers:
            fits = [o.cost for o in os_.options if o.error <= cap + 1e-12]
            if not fits:
                ok = False
                break
            total += min(fits)
        if ok and total <= inst.budget_kept:
            return alpha
    raise InfeasibleError("scan found nothing")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
