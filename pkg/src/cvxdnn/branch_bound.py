"""Best-bound branch-and-bound over LP relaxations for binary variables."""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model import OptModel, SolveResult, Status, VarKind
from .simplex import BoundedSimplex, SimplexOptions, expand_primal, lp_result, standard_form


@dataclass
class BBOptions:
    time_limit: float = 3600.0
    gap: float = 0.01
    integrality_tol: float = 1e-6
    seed: int = 0
    node_limit: int | None = None
    simplex: SimplexOptions = field(default_factory=SimplexOptions)

    def __post_init__(self):
        if self.time_limit <= 0:
            raise ValueError("time limit must be positive")
        if not 0 <= self.gap < 1:
            raise ValueError("relative gap tolerance must lie in [0, 1)")


def relative_gap(objective: float, bound: float) -> float:
    if not (math.isfinite(objective) and math.isfinite(bound)):
        return math.inf
    return abs(objective - bound) / max(abs(objective), 1e-9)


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    fixes: tuple = field(compare=False)
    warm: tuple | None = field(compare=False, default=None)
    depth: int = field(compare=False, default=0)


def solve_mip(model: OptModel, opts: BBOptions | None = None,
              start: dict[int, float] | None = None) -> SolveResult:
    """Minimise/maximise a model with binary variables.

    The search dives depth-first until the first incumbent, then always
    expands the open node with the best LP bound.  It stops when the tree
    is exhausted, the relative gap reaches ``opts.gap`` or time runs out.

    ``start`` optionally maps binary variable indices to 0/1.  Those values
    are fixed, the remaining LP is solved once, and an integral result
    seeds the incumbent.
    """
    opts = opts or BBOptions()
    t_start = time.perf_counter()
    deadline = t_start + opts.time_limit
    std = standard_form(model)
    engine = BoundedSimplex(std, opts.simplex)
    pos = {int(j): k for k, j in enumerate(std.cols)}
    bins = np.array([pos[j] for j, v in enumerate(model.variables)
                     if v.kind is VarKind.BINARY and j in pos], dtype=int)
    if bins.size == 0:
        out = engine.solve(deadline=deadline)
        return lp_result(model, std, out, time.perf_counter() - t_start)

    tol = opts.integrality_tol
    iterations = 0
    nodes = 0
    inc_x = None
    inc_obj = math.inf
    best_bound = -math.inf
    seq = 0
    heap: list[_Node] = []
    diagnostics: dict = {"bound_trace": []}

    def bounds_for(fixes):
        lo, hi = std.lo.copy(), std.hi.copy()
        for k, v in fixes:
            lo[k] = hi[k] = v
        return lo, hi

    pruned_min = [math.inf]

    def prunable(bound):
        if inc_x is None:
            return False
        if inc_obj - bound <= opts.gap * max(abs(inc_obj), 1e-9) + 1e-9:
            pruned_min[0] = min(pruned_min[0], bound)
            return True
        return False

    def fractional(x):
        vals = x[bins]
        frac = np.abs(vals - np.round(vals))
        return frac > tol, vals

    def try_incumbent(x, obj):
        nonlocal inc_x, inc_obj
        if obj < inc_obj:
            inc_x, inc_obj = x.copy(), obj

    root = engine.solve(deadline=deadline)
    iterations += root.iterations
    nodes += 1
    status = None
    if root.status is Status.INFEASIBLE:
        status = Status.INFEASIBLE
    elif root.status is Status.UNBOUNDED:
        res = lp_result(model, std, root, time.perf_counter() - t_start)
        res.bb_nodes = nodes
        return res
    elif root.status is not Status.OPTIMAL:
        status = Status.TIME_LIMIT
    if status is not None:
        return SolveResult(status, simplex_iterations=iterations, bb_nodes=nodes,
                           wall_time=time.perf_counter() - t_start)

    best_bound = root.objective
    is_frac, vals = fractional(root.x)
    if not is_frac.any():
        try_incumbent(root.x, root.objective)
    else:
        # LP rounding heuristic at the root
        lo, hi = bounds_for(zip(bins.tolist(), np.round(vals).tolist()))
        rounded = engine.solve(lo, hi, warm=root.warm, deadline=deadline)
        iterations += rounded.iterations
        if rounded.status is Status.OPTIMAL:
            try_incumbent(rounded.x, rounded.objective)
        heapq.heappush(heap, _Node(root.objective, seq, (), root.warm))
        seq += 1
        if start:
            fixes = [(pos[j], float(round(v))) for j, v in start.items() if j in pos]
            lo, hi = bounds_for(fixes)
            seeded = engine.solve(lo, hi, warm=root.warm, deadline=deadline)
            iterations += seeded.iterations
            ok = seeded.status is Status.OPTIMAL and not fractional(seeded.x)[0].any()
            diagnostics["start_accepted"] = bool(ok)
            if ok:
                try_incumbent(seeded.x, seeded.objective)

    # each heap entry is a node whose parent LP has been solved but not branched;
    # the root re-enters the heap unbranched so branching happens in one place
    dive = inc_x is None
    current = None
    stopped = None
    while True:
        if current is None:
            if not heap:
                break
            if dive:
                # backtrack to the deepest open node, newest first
                i = max(range(len(heap)), key=lambda n: (heap[n].depth, heap[n].seq))
                current = heap[i]
                heap[i] = heap[-1]
                heap.pop()
                heapq.heapify(heap)
            else:
                current = heapq.heappop(heap)
        lb = min([current.bound] + ([heap[0].bound] if heap else []))
        if inc_x is not None:
            lb = min(lb, inc_obj)
        if lb > best_bound:
            best_bound = lb
            diagnostics["bound_trace"].append(best_bound)
        if prunable(current.bound):
            current = None
            continue
        if inc_x is not None and relative_gap(inc_obj, max(best_bound, lb)) <= opts.gap:
            stopped = Status.GAP_REACHED
            break
        if time.perf_counter() > deadline:
            stopped = Status.TIME_LIMIT
            heapq.heappush(heap, current)
            break
        if opts.node_limit is not None and nodes >= opts.node_limit:
            stopped = Status.TIME_LIMIT
            diagnostics["node_limit"] = True
            heapq.heappush(heap, current)
            break

        lo, hi = bounds_for(current.fixes)
        if current.fixes:
            out = engine.solve(lo, hi, warm=current.warm, deadline=deadline)
            iterations += out.iterations
            nodes += 1
            if out.status is Status.TIME_LIMIT:
                stopped = Status.TIME_LIMIT
                heapq.heappush(heap, current)
                break
            if out.status is not Status.OPTIMAL or prunable(out.objective):
                current = None
                continue
            x, obj, warm = out.x, out.objective, out.warm
        else:
            x, obj, warm = root.x, root.objective, root.warm

        is_frac, vals = fractional(x)
        if not is_frac.any():
            try_incumbent(x, obj)
            if dive:
                dive = False
            current = None
            continue

        # most fractional binary, ties to the lowest column index
        score = np.where(is_frac, np.abs(vals - np.floor(vals) - 0.5), np.inf)
        b = int(np.argmin(score))
        k = int(bins[b])
        up_first = vals[b] >= 0.5
        children = []
        for v in ((1.0, 0.0) if up_first else (0.0, 1.0)):
            children.append(_Node(obj, seq, current.fixes + ((k, v),), warm, current.depth + 1))
            seq += 1
        if dive:
            heapq.heappush(heap, children[1])
            current = children[0]
        else:
            for ch in children:
                heapq.heappush(heap, ch)
            current = None

    wall = time.perf_counter() - t_start
    if inc_x is None:
        if stopped is Status.TIME_LIMIT:
            return SolveResult(Status.TIME_LIMIT, best_bound=std.sign * best_bound,
                               simplex_iterations=iterations, bb_nodes=nodes, wall_time=wall,
                               diagnostics=diagnostics)
        return SolveResult(Status.INFEASIBLE, simplex_iterations=iterations, bb_nodes=nodes,
                           wall_time=wall, diagnostics=diagnostics)
    if stopped is None:
        # tree exhausted: the only regions left unexplored were pruned against the incumbent
        best_bound = max(best_bound, min(inc_obj, pruned_min[0]))
    best_bound = min(best_bound, inc_obj)
    gap = relative_gap(inc_obj, best_bound)
    if stopped is Status.TIME_LIMIT:
        status = Status.TIME_LIMIT
    else:
        status = Status.OPTIMAL if gap <= 1e-9 else Status.GAP_REACHED
    full = expand_primal(model, std, inc_x)
    diagnostics["open_nodes"] = len(heap)
    return SolveResult(
        status,
        objective=std.sign * inc_obj,
        best_bound=std.sign * best_bound,
        gap=gap,
        primal={v.name: float(full[j]) for j, v in enumerate(model.variables)},
        simplex_iterations=iterations,
        bb_nodes=nodes,
        wall_time=wall,
        diagnostics=diagnostics,
    )
