"""Two-phase bounded-variable primal simplex.

Every row ``i`` gets a logical variable ``r_i = a_i x`` whose bounds encode
the row sense, so the working system is ``[A | -I] (x, r) = 0`` and the
all-logical basis is always a valid start.  Variable bounds are handled
implicitly.  Phase 1 minimises the total bound violation of the basic
variables; a row whose logical starts out of bounds plays the role of an
artificial variable.  The basis inverse is kept as a sparse LU factor plus
a product-form eta file, refactorised periodically.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .model import ObjSense, OptModel, Sense, SolveResult, Status, VarKind

AT_LOWER, AT_UPPER, AT_ZERO = 0, 1, 2


class SolverError(RuntimeError):
    pass


@dataclass
class SimplexOptions:
    feasibility_tol: float = 1e-7
    optimality_tol: float = 1e-7
    max_iterations: int = 1_000_000
    # consecutive degenerate pivots before switching to Bland's rule
    bland_after: int = 1000
    refactor_every: int = 40
    pivot_tol: float = 1e-9

    def __post_init__(self):
        if self.feasibility_tol <= 0 or self.optimality_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class StandardForm:
    """Presolved minimisation form of an OptModel.

    Fixed variables are substituted out and empty rows dropped (after
    checking them).  ``cols[k]`` is the model index of structural column k.
    """

    A: sp.csc_matrix
    c: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    obj_const: float
    sign: float
    cols: np.ndarray
    fixed: dict[int, float]
    row_ids: np.ndarray
    infeasible_rows: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]


def standard_form(model: OptModel, tol: float = 1e-9) -> StandardForm:
    model.validate()
    sign = -1.0 if model.objective.sense is ObjSense.MAXIMIZE else 1.0
    fixed = {j: v.lower for j, v in enumerate(model.variables) if v.lower == v.upper}
    cols = np.array([j for j in range(model.n_vars) if j not in fixed], dtype=int)
    pos = {int(j): k for k, j in enumerate(cols)}
    rows, colidx, vals = [], [], []
    row_lo, row_hi, row_ids, bad = [], [], [], []
    for i, con in enumerate(model.constraints):
        shift = 0.0
        kept = []
        for j, a in con.terms:
            if j in fixed:
                shift += a * fixed[j]
            elif a != 0.0:
                kept.append((pos[j], a))
        rhs = con.rhs - shift
        lo = rhs if con.sense in (Sense.GE, Sense.EQ) else -math.inf
        hi = rhs if con.sense in (Sense.LE, Sense.EQ) else math.inf
        if not kept:
            if lo > tol or hi < -tol:
                bad.append(con.name)
            continue
        r = len(row_ids)
        for k, a in kept:
            rows.append(r)
            colidx.append(k)
            vals.append(a)
        row_lo.append(lo)
        row_hi.append(hi)
        row_ids.append(i)
    m, n = len(row_ids), len(cols)
    A = sp.csc_matrix((vals, (rows, colidx)), shape=(m, n))
    c = np.zeros(n)
    const = model.objective.constant
    for j, a in model.objective.terms:
        if j in fixed:
            const += a * fixed[j]
        else:
            c[pos[j]] += a
    lo = np.array([model.variables[j].lower for j in cols], dtype=float)
    hi = np.array([model.variables[j].upper for j in cols], dtype=float)
    return StandardForm(A, sign * c, lo, hi, np.array(row_lo, dtype=float),
                        np.array(row_hi, dtype=float), sign * const, sign, cols, fixed,
                        np.array(row_ids, dtype=int), bad)


@dataclass
class LPOutcome:
    status: Status
    x: np.ndarray | None
    objective: float
    iterations: int
    warm: tuple | None
    diagnostics: dict


class BoundedSimplex:
    """Reusable simplex engine over one StandardForm.

    ``solve`` accepts overriding structural bounds and an optional warm
    basis, which is how branch-and-bound re-solves child nodes.
    """

    def __init__(self, std: StandardForm, opts: SimplexOptions | None = None):
        self.std = std
        self.opts = opts or SimplexOptions()
        m, n = std.m, std.n
        self.m, self.n, self.N = m, n, n + m
        self.K = sp.hstack([std.A, -sp.identity(m, format="csc")], format="csc")
        self.KT = self.K.T.tocsr()
        self.cost = np.concatenate([std.c, np.zeros(m)])
        self._indptr = self.K.indptr
        self._indices = self.K.indices
        self._data = self.K.data

    # -- linear algebra -------------------------------------------------------

    def _column(self, j):
        a = np.zeros(self.m)
        s, e = self._indptr[j], self._indptr[j + 1]
        a[self._indices[s:e]] = self._data[s:e]
        return a

    def _factor(self, basis):
        B = self.K[:, basis]
        self.lu = splu(B.tocsc(), permc_spec="COLAMD")
        self.etas = []

    def _ftran(self, a):
        y = self.lu.solve(a)
        for p, col in self.etas:
            yp = y[p] / col[p]
            if yp != 0.0:
                y -= yp * col
            y[p] = yp
        return y

    def _btran(self, c):
        y = c.copy()
        for p, col in reversed(self.etas):
            cp = col[p]
            y[p] = (y[p] - (col @ y - cp * y[p])) / cp
        return self.lu.solve(y, trans="T")

    # -- main loop -------------------------------------------------------------

    def solve(self, lo=None, hi=None, warm=None, deadline: float | None = None) -> LPOutcome:
        std, opts = self.std, self.opts
        m, N = self.m, self.N
        if std.infeasible_rows:
            return LPOutcome(Status.INFEASIBLE, None, math.nan, 0, None,
                             {"empty_infeasible_rows": list(std.infeasible_rows)})
        lo = std.lo if lo is None else np.asarray(lo, dtype=float)
        hi = std.hi if hi is None else np.asarray(hi, dtype=float)
        if np.any(lo > hi):
            return LPOutcome(Status.INFEASIBLE, None, math.nan, 0, None,
                             {"inverted_bounds": np.flatnonzero(lo > hi).tolist()})
        L = np.concatenate([lo, std.row_lo])
        U = np.concatenate([hi, std.row_hi])
        if m == 0:
            return self._solve_empty(L, U)

        if warm is not None:
            basis = np.array(warm[0], dtype=int)
            state = np.array(warm[1], dtype=np.int8)
        else:
            basis = np.arange(self.n, N)
            state = np.full(N, AT_LOWER, dtype=np.int8)
        x = np.zeros(N)
        is_basic = np.zeros(N, dtype=bool)
        is_basic[basis] = True
        self._place_nonbasic(x, state, is_basic, L, U)
        try:
            self._factor(basis)
        except RuntimeError:
            basis = np.arange(self.n, N)
            is_basic[:] = False
            is_basic[basis] = True
            state[:] = AT_LOWER
            self._place_nonbasic(x, state, is_basic, L, U)
            self._factor(basis)
        x[basis] = self._basic_values(x, is_basic)

        ftol, otol, ptol = opts.feasibility_tol, opts.optimality_tol, opts.pivot_tol
        it = 0
        degenerate = 0
        bland = False
        since_refactor = 0
        diagnostics: dict = {}
        while True:
            if since_refactor >= opts.refactor_every:
                self._factor(basis)
                x[basis] = self._basic_values(x, is_basic)
                since_refactor = 0
            if it >= opts.max_iterations:
                return self._finish(Status.ITERATION_LIMIT, x, it, basis, state, is_basic, diagnostics)
            if deadline is not None and it % 20 == 0 and time.perf_counter() > deadline:
                return self._finish(Status.TIME_LIMIT, x, it, basis, state, is_basic, diagnostics)

            xB = x[basis]
            LB, UB = L[basis], U[basis]
            below = xB < LB - ftol
            above = xB > UB + ftol
            phase1 = bool(below.any() or above.any())
            if phase1:
                cB = above.astype(float) - below.astype(float)
                y = self._btran(cB)
                d = -(self.KT @ y)
            else:
                y = self._btran(self.cost[basis])
                d = self.cost - self.KT @ y
            can_up = (d < -otol) & (x < U - 1e-12) & ~is_basic
            can_down = (d > otol) & (x > L + 1e-12) & ~is_basic
            eligible = can_up | can_down
            if not eligible.any():
                if since_refactor > 0:
                    # confirm on fresh factors before declaring termination
                    self._factor(basis)
                    x[basis] = self._basic_values(x, is_basic)
                    since_refactor = 0
                    continue
                if phase1:
                    infeas = float(np.sum(np.maximum(L[basis] - xB, 0) + np.maximum(xB - U[basis], 0)))
                    diagnostics["phase1_infeasibility"] = infeas
                    diagnostics["farkas_y"] = y
                    return self._finish(Status.INFEASIBLE, x, it, basis, state, is_basic, diagnostics)
                diagnostics["duals"] = std.sign * y
                return self._finish(Status.OPTIMAL, x, it, basis, state, is_basic, diagnostics)

            cand = np.flatnonzero(eligible)
            if bland:
                q = int(cand[0])
            else:
                q = int(cand[np.argmax(np.abs(d[cand]))])
            s = 1.0 if d[q] < 0 else -1.0
            alpha = self._ftran(self._column(q))
            delta = -s * alpha  # rate of change of each basic value per unit step

            # blocking bounds for each basic variable
            if phase1:
                dec_bound = np.where(above, UB, np.where(below, -np.inf, LB))
                inc_bound = np.where(below, LB, np.where(above, np.inf, UB))
            else:
                dec_bound, inc_bound = LB, UB
            dec = (delta < -ptol) & np.isfinite(dec_bound)
            inc = (delta > ptol) & np.isfinite(inc_bound)
            flip = U[q] - L[q]
            r = -1
            t = math.inf
            idx_dec = np.flatnonzero(dec)
            idx_inc = np.flatnonzero(inc)
            ratios = np.concatenate([(xB[idx_dec] - dec_bound[idx_dec]) / -delta[idx_dec],
                                     (inc_bound[idx_inc] - xB[idx_inc]) / delta[idx_inc]])
            rows = np.concatenate([idx_dec, idx_inc])
            if rows.size:
                if bland:
                    tmin = ratios.min()
                    ties = rows[ratios <= tmin + 1e-12]
                    r = int(ties[np.argmin(basis[ties])])
                else:
                    # Harris two-pass: relaxed bounds fix the step, largest pivot wins
                    relaxed = np.concatenate([(xB[idx_dec] - dec_bound[idx_dec] + ftol) / -delta[idx_dec],
                                              (inc_bound[idx_inc] - xB[idx_inc] + ftol) / delta[idx_inc]])
                    tmax = relaxed.min()
                    ok = ratios <= tmax
                    sel = rows[ok]
                    r = int(sel[np.argmax(np.abs(delta[sel]))])
                k = int(np.flatnonzero(rows == r)[0])
                t = max(float(ratios[k]), 0.0)
            if flip <= t:
                if not math.isfinite(flip):
                    if phase1:
                        raise SolverError("phase-1 ray without blocking variable")
                    ray = np.zeros(N)
                    ray[q] = s
                    ray[basis] = delta
                    diagnostics["unbounded_ray"] = ray[: self.n]
                    return self._finish(Status.UNBOUNDED, x, it, basis, state, is_basic, diagnostics)
                # bound flip: entering variable crosses to its other bound
                x[q] = U[q] if s > 0 else L[q]
                state[q] = AT_UPPER if s > 0 else AT_LOWER
                x[basis] = xB + delta * flip
                it += 1
                degenerate = 0
                bland = False
                continue
            leave = int(basis[r])
            x[basis] = xB + delta * t
            x[q] += s * t
            if delta[r] < 0:
                x[leave] = dec_bound[r]
                state[leave] = AT_LOWER if dec_bound[r] == L[leave] else AT_UPPER
            else:
                x[leave] = inc_bound[r]
                state[leave] = AT_UPPER if inc_bound[r] == U[leave] else AT_LOWER
            is_basic[leave] = False
            is_basic[q] = True
            basis[r] = q
            self.etas.append((r, alpha))
            since_refactor += 1
            it += 1
            if t <= 1e-12:
                degenerate += 1
                if degenerate >= opts.bland_after:
                    bland = True
            else:
                degenerate = 0
                bland = False

    def _place_nonbasic(self, x, state, is_basic, L, U):
        lo_ok = np.isfinite(L)
        hi_ok = np.isfinite(U)
        vals = np.where((state == AT_LOWER) & lo_ok, L,
                        np.where((state == AT_UPPER) & hi_ok, U,
                                 np.where(lo_ok, L, np.where(hi_ok, U, 0.0))))
        state[:] = np.where(lo_ok & (vals == L), AT_LOWER,
                            np.where(hi_ok & (vals == U), AT_UPPER, AT_ZERO))
        nb = ~is_basic
        x[nb] = vals[nb]

    def _basic_values(self, x, is_basic):
        xN = np.where(is_basic, 0.0, x)
        return self._ftran(-(self.K @ xN))

    def _finish(self, status, x, it, basis, state, is_basic, diagnostics) -> LPOutcome:
        xs = x[: self.n].copy()
        obj = float(self.cost[: self.n] @ xs) + self.std.obj_const
        warm = (basis.copy(), state.copy())
        return LPOutcome(status, xs, obj, it, warm, diagnostics)

    def _solve_empty(self, L, U) -> LPOutcome:
        c = self.cost[: self.n]
        x = np.zeros(self.n)
        for j in range(self.n):
            if c[j] > 0:
                x[j] = L[j]
            elif c[j] < 0:
                x[j] = U[j]
            else:
                x[j] = min(max(0.0, L[j]), U[j])
            if not math.isfinite(x[j]):
                ray = np.zeros(self.n)
                ray[j] = -np.sign(c[j])
                return LPOutcome(Status.UNBOUNDED, np.where(np.isfinite(x), x, 0.0), math.nan, 0,
                                 None, {"unbounded_ray": ray})
        obj = float(c @ x) + self.std.obj_const
        state = np.where(x == L, AT_LOWER, np.where(x == U, AT_UPPER, AT_ZERO)).astype(np.int8)
        return LPOutcome(Status.OPTIMAL, x, obj, 0, (np.arange(0), state), {})


def expand_primal(model: OptModel, std: StandardForm, xs) -> np.ndarray:
    """Full model-indexed primal vector from standard-form column values."""
    full = np.zeros(model.n_vars)
    for j, v in std.fixed.items():
        full[j] = v
    full[std.cols] = xs
    return full


def solve_lp(model: OptModel, opts: SimplexOptions | None = None,
             time_limit: float | None = None) -> SolveResult:
    """Solve a continuous model; binaries are rejected."""
    if model.binaries:
        raise ValueError("solve_lp handles continuous models only; use solve_mip for binaries")
    start = time.perf_counter()
    std = standard_form(model)
    engine = BoundedSimplex(std, opts)
    deadline = None if time_limit is None else start + time_limit
    out = engine.solve(deadline=deadline)
    return lp_result(model, std, out, time.perf_counter() - start)


def lp_result(model, std, out: LPOutcome, wall: float) -> SolveResult:
    res = SolveResult(out.status, simplex_iterations=out.iterations, wall_time=wall,
                      diagnostics=dict(out.diagnostics))
    if out.status is Status.OPTIMAL:
        full = expand_primal(model, std, out.x)
        res.objective = std.sign * out.objective
        res.best_bound = res.objective
        res.gap = 0.0
        res.primal = {v.name: float(full[j]) for j, v in enumerate(model.variables)}
    elif out.status is Status.UNBOUNDED:
        res.objective = -std.sign * math.inf
        res.best_bound = res.objective
    return res
