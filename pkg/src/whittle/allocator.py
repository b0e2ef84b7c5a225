"""Exact solver for the constrained multi-choice knapsack: pick one option
per layer minimizing summed error subject to a kept-parameter budget and a
per-layer error cap.

Costs enter the DP through integer-scaled keys ``(param_precision * cost) //
P_total`` (exact rational floor, no float fuzz), while the true unscaled cost
rides along with every state so the budget check is never subject to
discretization. At ``param_precision == P_total`` the scaling is the
identity and the solver is exact; two independent oracles (exhaustive
enumeration and a layered-DAG shortest path) back that claim in the tests.

Ties everywhere resolve to the larger kept total, then the lexicographically
smallest choice vector. Solvers are single-threaded; distinct instances are
plain values and may be solved concurrently.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
import json

from .errors import InfeasibleError, StoreError, WhittleError
from .profiler import CompressionOption, OptionSet

CAP_TOL = 1e-12


@dataclass
class MckpInstance:
    layers: list[OptionSet]
    budget_kept: int
    alpha: float | str = "auto"
    e_ref: float = 0.0
    param_precision: int = 100000


@dataclass
class AllocationPlan:
    """Chosen option index per layer plus the achieved exact totals."""

    choices: list[int]
    total_kept: int
    total_error: float
    alpha_used: float


def p_total(inst: MckpInstance) -> int:
    return sum(os_.d1 * os_.d2 for os_ in inst.layers)


def _cap_value(alpha: float, e_ref: float) -> float:
    return math.inf if math.isinf(alpha) else alpha * e_ref


def _passes(error: float, cap: float) -> bool:
    return error <= cap + CAP_TOL


def _ratio(error: float, e_ref: float) -> float:
    if error <= 0.0:
        return 0.0
    return error / e_ref if e_ref > 0.0 else math.inf


def _feasible_at(inst: MckpInstance, alpha: float) -> tuple[bool, str | None]:
    """Cheapest cap-passing option per layer; feasible if the sum fits."""
    cap = _cap_value(alpha, inst.e_ref)
    total = 0
    worst_name, worst_cost = None, -1
    for os_ in inst.layers:
        costs = [o.cost for o in os_.options if _passes(o.error, cap)]
        if not costs:
            return False, os_.layer_name
        c = min(costs)
        total += c
        if c > worst_cost:
            worst_name, worst_cost = os_.layer_name, c
    if total > inst.budget_kept:
        return False, worst_name
    return True, None


def min_feasible_alpha(inst: MckpInstance) -> float:
    """Smallest cap multiplier (from the finite option-ratio set, with an
    infinity guard) admitting a budget- and cap-feasible selection.

    Feasibility is monotone in alpha, so a binary search over the sorted
    candidate ratios finds the infimum exactly.
    """
    if inst.e_ref < 0:
        raise ValueError("e_ref must be nonnegative")
    ratios = sorted(
        {_ratio(o.error, inst.e_ref) for os_ in inst.layers for o in os_.options}
    )
    if not ratios:
        ratios = [0.0]
    if not math.isinf(ratios[-1]):
        ratios.append(math.inf)
    ok, blocking = _feasible_at(inst, ratios[-1])
    if not ok:
        raise InfeasibleError(
            f"no alpha admits a feasible selection (blocking layer: {blocking})"
        )
    lo, hi = 0, len(ratios) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _feasible_at(inst, ratios[mid])[0]:
            hi = mid
        else:
            lo = mid + 1
    return ratios[lo]


def resolve_alpha(inst: MckpInstance) -> float:
    if inst.alpha == "auto":
        return min_feasible_alpha(inst)
    alpha = float(inst.alpha)
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return alpha


def _validate(inst: MckpInstance) -> None:
    if inst.budget_kept < 0:
        raise ValueError("budget_kept must be nonnegative")
    if inst.budget_kept > p_total(inst):
        raise ValueError("budget_kept exceeds the total parameter count")
    if inst.layers and inst.param_precision < len(inst.layers):
        raise ValueError("param_precision must be at least the number of layers")


def _filtered(
    inst: MckpInstance, alpha: float
) -> list[list[tuple[int, CompressionOption]]]:
    """Per layer, the (original_index, option) pairs passing the error cap."""
    cap = _cap_value(alpha, inst.e_ref)
    out = []
    for os_ in inst.layers:
        opts = [(i, o) for i, o in enumerate(os_.options) if _passes(o.error, cap)]
        if not opts:
            raise InfeasibleError(
                f"layer {os_.layer_name}: no option satisfies the error cap "
                f"{cap:.6g}"
            )
        out.append(opts)
    return out


# ---------------------------------------------------------------------------
# bottom-up DP

# state tuple: (error_sum, kept_exact, prev_key, option_index)


def _choices_of(levels, level: int, key: int) -> list[int]:
    out = []
    while level > 0:
        st = levels[level][key]
        out.append(st[3])
        key = st[2]
        level -= 1
    out.reverse()
    return out


def _choices_of_state(levels, level: int, st) -> list[int]:
    return _choices_of(levels, level - 1, st[2]) + [st[3]]


def _merge_better(cand, cur, levels, level: int) -> bool:
    if cand[0] != cur[0]:
        return cand[0] < cur[0]
    if cand[1] != cur[1]:
        return cand[1] < cur[1]  # smaller exact kept keeps budget headroom
    return _choices_of_state(levels, level, cand) < _choices_of_state(levels, level, cur)


def _prune_frontier(frontier: dict, rule: str) -> dict:
    if rule == "none" or len(frontier) <= 1:
        return frontier
    if rule == "safe":
        # prune a state when a no-costlier state is no worse
        keys = sorted(frontier)
    elif rule == "prune_cheaper":
        # prune a state when a no-cheaper state is no worse; keeping the
        # costlier representative can sacrifice budget headroom, so this
        # rule is only for comparison runs
        keys = sorted(frontier, reverse=True)
    else:
        raise ValueError(f"unknown pruning rule {rule!r}")
    kept = {}
    best = math.inf
    for k in keys:
        err = frontier[k][0]
        if err < best:
            kept[k] = frontier[k]
            best = err
    return {k: kept[k] for k in sorted(kept)}


def solve_dp(inst: MckpInstance, pruning: str = "safe") -> AllocationPlan:
    """Scaled bottom-up DP with dominated-state pruning and backtracking.

    ``pruning`` is "safe" (default: drop states both costlier and no
    better), "prune_cheaper" (drop states both cheaper and no better), or
    "none". The safe rule never changes the optimum; the alternative is
    kept only for comparison against the oracles.
    """
    _validate(inst)
    alpha = resolve_alpha(inst)
    if not inst.layers:
        return AllocationPlan(choices=[], total_kept=0, total_error=0.0, alpha_used=alpha)
    filt = _filtered(inst, alpha)
    P = p_total(inst)
    pp = inst.param_precision
    n_layers = len(inst.layers)
    bound = (pp * inst.budget_kept) // P + n_layers
    levels: list[dict] = [{0: (0.0, 0, -1, -1)}]
    for level in range(1, n_layers + 1):
        frontier = levels[level - 1]
        nxt: dict = {}
        for key in sorted(frontier):
            err, kept, _, _ = frontier[key]
            for orig_idx, opt in filt[level - 1]:
                nk = key + (pp * opt.cost) // P
                if nk > bound:
                    continue
                cand = (err + opt.error, kept + opt.cost, key, orig_idx)
                cur = nxt.get(nk)
                if cur is None or _merge_better(cand, cur, levels, level):
                    nxt[nk] = cand
        nxt = _prune_frontier(nxt, pruning)
        levels.append(nxt)
    best_key, best = None, None
    for key in sorted(levels[-1]):
        st = levels[-1][key]
        if st[1] > inst.budget_kept:
            continue
        if best is None:
            best_key, best = key, st
            continue
        if (st[0], -st[1]) < (best[0], -best[1]):
            best_key, best = key, st
        elif (st[0], st[1]) == (best[0], best[1]) and _choices_of_state(
            levels, n_layers, st
        ) < _choices_of_state(levels, n_layers, best):
            best_key, best = key, st
    if best is None:
        raise InfeasibleError(
            f"no selection fits the kept-parameter budget {inst.budget_kept}"
        )
    choices = _choices_of_state(levels, n_layers, best)
    return _finish(inst, choices, alpha)


def _finish(inst: MckpInstance, choices: list[int], alpha: float) -> AllocationPlan:
    """Recompute totals from exact unscaled costs and check the invariants."""
    cap = _cap_value(alpha, inst.e_ref)
    total_kept = 0
    total_error = 0.0
    for os_, idx in zip(inst.layers, choices):
        opt = os_.options[idx]
        if not _passes(opt.error, cap):
            raise WhittleError(f"layer {os_.layer_name}: chosen option violates the cap")
        total_kept += opt.cost
        total_error += opt.error
    if total_kept > inst.budget_kept:
        raise WhittleError("plan exceeds the kept-parameter budget")
    return AllocationPlan(
        choices=choices,
        total_kept=total_kept,
        total_error=total_error,
        alpha_used=alpha,
    )


# ---------------------------------------------------------------------------
# oracles


def brute_force_oracle(inst: MckpInstance, max_product: int = 10**6) -> AllocationPlan:
    """Exhaustive enumeration with exact costs (verification only)."""
    _validate(inst)
    alpha = resolve_alpha(inst)
    if not inst.layers:
        return AllocationPlan(choices=[], total_kept=0, total_error=0.0, alpha_used=alpha)
    filt = _filtered(inst, alpha)
    size = 1
    for opts in filt:
        size *= len(opts)
        if size > max_product:
            raise ValueError(f"instance too large for brute force ({size} selections)")
    best = None  # (err, -kept, choices)
    for combo in itertools.product(*filt):
        kept = sum(o.cost for _, o in combo)
        if kept > inst.budget_kept:
            continue
        err = sum(o.error for _, o in combo)
        key = (err, -kept, [i for i, _ in combo])
        if best is None or key < best:
            best = key
    if best is None:
        raise InfeasibleError(
            f"no selection fits the kept-parameter budget {inst.budget_kept}"
        )
    return _finish(inst, best[2], alpha)


def dijkstra_oracle(inst: MckpInstance) -> AllocationPlan:
    """Layered-DAG shortest path with a budget-aware sink rule.

    Nodes are (layer, scaled-kept) labels; a terminal node connects to the
    sink exactly when its exact kept count fits the budget. Edge costs are
    the option errors (nonnegative), so a heap-based shortest-path search
    applies directly.
    """
    _validate(inst)
    alpha = resolve_alpha(inst)
    if not inst.layers:
        return AllocationPlan(choices=[], total_kept=0, total_error=0.0, alpha_used=alpha)
    filt = _filtered(inst, alpha)
    P = p_total(inst)
    pp = inst.param_precision
    n_layers = len(inst.layers)
    bound = (pp * inst.budget_kept) // P + n_layers
    # node records: (layer, key) -> (err, kept_exact, prev_key, option_index)
    dist = {(0, 0): (0.0, 0, -1, -1)}
    heap = [(0.0, 0, 0)]
    settled = set()
    while heap:
        err, layer, key = heapq.heappop(heap)
        node = (layer, key)
        if node in settled or err > dist[node][0]:
            continue
        settled.add(node)
        if layer == n_layers:
            continue
        kept = dist[node][1]
        for orig_idx, opt in filt[layer]:
            nk = key + (pp * opt.cost) // P
            if nk > bound:
                continue
            nxt = (layer + 1, nk)
            cand = (err + opt.error, kept + opt.cost, key, orig_idx)
            cur = dist.get(nxt)
            if cur is None or cand[0] < cur[0]:
                dist[nxt] = cand
                heapq.heappush(heap, (cand[0], layer + 1, nk))
    best = None
    best_choices = None
    for (layer, key), st in sorted(dist.items()):
        if layer != n_layers or st[1] > inst.budget_kept:
            continue
        if best is None or (st[0], -st[1]) < (best[0], -best[1]):
            best, best_choices = st, _walk(dist, n_layers, key)
        elif (st[0], st[1]) == (best[0], best[1]):
            choices = _walk(dist, n_layers, key)
            if choices < best_choices:
                best, best_choices = st, choices
    if best is None:
        raise InfeasibleError(
            f"no selection fits the kept-parameter budget {inst.budget_kept}"
        )
    return _finish(inst, best_choices, alpha)


def _walk(dist, n_layers: int, key: int) -> list[int]:
    out = []
    layer = n_layers
    while layer > 0:
        st = dist[(layer, key)]
        out.append(st[3])
        key = st[2]
        layer -= 1
    out.reverse()
    return out


# ---------------------------------------------------------------------------
# plan JSON


def plan_to_json(
    plan: AllocationPlan,
    inst: MckpInstance,
    pipeline_meta: dict | None = None,
) -> dict:
    layers = {}
    for os_, idx in zip(inst.layers, plan.choices):
        o = os_.options[idx]
        layers[os_.layer_name] = {
            "rank_k": o.rank_k,
            "s": o.per_col_nnz_s,
            "cost": o.cost,
            "error": o.error,
        }
    doc = {
        "format_version": 1,
        "alpha_used": plan.alpha_used,
        "total_kept": plan.total_kept,
        "total_error": plan.total_error,
        "budget_kept": inst.budget_kept,
        "param_precision": inst.param_precision,
        "e_ref": inst.e_ref,
        "layers": layers,
    }
    if pipeline_meta:
        doc["pipeline"] = pipeline_meta
    return doc


def write_plan(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_plan(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StoreError(f"missing plan file {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise StoreError(f"{path}: invalid JSON ({e})") from e
    if "layers" not in doc:
        raise StoreError(f"{path}: not a plan document")
    return doc
