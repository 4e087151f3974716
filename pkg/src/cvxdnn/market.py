"""Aggregator day-ahead bidding: prosumer response, instances, model assembly, evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .branch_bound import BBOptions, solve_mip
from .embeddings import (BigM, CvxdLP, Embedding, EmbeddingError, Hybrid, PCAR, PCTAR, Pwl,
                         activation_start, build_pwl, embed_bigm, embed_cvxd, embed_hybrid, embed_pcar, embed_pctar,
                         pwl_start, tabulate_pwl)
from .model import INF, ObjSense, OptModel, Sense, SolveResult, Status
from .network import DEFAULT_BOUNDS, DEFAULT_MARGIN, ReluNetwork, relu_forward

ZERO_BID = 1e-9
CATEGORIES = ("low", "medium", "high")


class DomainError(ValueError):
    """Raised where the cost curve is undefined (x <= 0 or x >= xtilde)."""


# -- prosumer response ---------------------------------------------------------

def responsiveness(xt, q, r, incentive):
    """Flexibility volume offered at a given incentive price (saturation curve)."""
    xt, q, r, lam = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (xt, q, r, incentive)))
    out = xt / (1.0 + np.exp(q - r * lam))
    return float(out) if out.ndim == 0 else out


def incentive(x, xt, q, r):
    """Inverse of ``responsiveness``; needs 0 < x < xtilde."""
    x, xt, q, r = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, xt, q, r)))
    if np.any(x <= 0) or np.any(x >= xt):
        raise DomainError("incentive is defined only for 0 < x < xtilde")
    out = (q - np.log(xt / x - 1.0)) / r
    return float(out) if out.ndim == 0 else out


def purchase_cost(x, xt, q, r):
    """Total purchase cost x * incentive; 0 at x = 0 by continuity."""
    x, xt, q, r = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, xt, q, r)))
    if np.any(x < 0) or np.any((x >= xt) & (x > 0)):
        raise DomainError("purchase cost is defined only for 0 <= x < xtilde")
    out = np.zeros(x.shape)
    pos = x > 0
    out[pos] = x[pos] * (q[pos] - np.log(xt[pos] / x[pos] - 1.0)) / r[pos]
    return float(out) if out.ndim == 0 else out


# -- instances -------------------------------------------------------------------

@dataclass(frozen=True)
class PriceCalibration:
    mu: float = 1.2
    sigma: float = 0.6
    scale_low: float = 1.0
    scale_medium: float = 20.0
    scale_high: float = 400.0

    def scale(self, category: str) -> float:
        return {"low": self.scale_low, "medium": self.scale_medium, "high": self.scale_high}[category]


@dataclass
class MarketInstance:
    prices: np.ndarray
    xbar: np.ndarray
    A: np.ndarray
    q: np.ndarray
    r: np.ndarray
    category: str = "low"
    seed: int | None = None

    def __post_init__(self):
        self.prices = np.asarray(self.prices, dtype=float).reshape(-1)
        self.xbar = np.asarray(self.xbar, dtype=float).reshape(-1)
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        self.r = np.asarray(self.r, dtype=float).reshape(-1)
        T = self.prices.size
        self.A = np.asarray(self.A, dtype=float).reshape(T, T)
        self.check()

    @property
    def T(self) -> int:
        return self.prices.size

    def check(self):
        T = self.T
        if T < 1:
            raise ValueError("horizon must have at least one period")
        for name in ("xbar", "q", "r"):
            if getattr(self, name).size != T:
                raise ValueError(f"{name} must have length {T}")
        arrays = (self.prices, self.xbar, self.A, self.q, self.r)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("instance contains non-finite values")
        if np.any(np.triu(self.A) != 0):
            raise ValueError("rebound matrix must be strictly lower triangular")
        if np.any(self.A < 0) or np.any(self.A.sum(axis=0) > 1.0 + 1e-12):
            raise ValueError("rebound matrix needs non-negative entries and column sums <= 1")
        if np.any(self.xbar < 0) or np.any(self.r <= 0) or np.any(self.q < 0):
            raise ValueError("need xbar >= 0, r > 0 and q >= 0")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown price category {self.category!r}")

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "category": self.category,
            "seed": self.seed,
            "prices": self.prices.tolist(),
            "xbar": self.xbar.tolist(),
            "A": self.A.tolist(),
            "q": self.q.tolist(),
            "r": self.r.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketInstance":
        if d.get("version") != 1:
            raise ValueError(f"unsupported instance version {d.get('version')!r}")
        return cls(d["prices"], d["xbar"], d["A"], d["q"], d["r"], d.get("category", "low"), d.get("seed"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "MarketInstance":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "MarketInstance":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def rebound_matrix(T: int, rng, col_sum=(0.2, 0.6)) -> np.ndarray:
    A = np.tril(rng.uniform(0.0, 1.0, size=(T, T)), k=-1)
    sums = A.sum(axis=0)
    target = rng.uniform(*col_sum, size=T)
    nz = sums > 0
    A[:, nz] *= target[nz] / sums[nz]
    return A


def generate_instance(category: str = "low", T: int = 24, seed: int = 0,
                      calibration: PriceCalibration | None = None, bounds=DEFAULT_BOUNDS) -> MarketInstance:
    if category not in CATEGORIES:
        raise ValueError(f"unknown price category {category!r}")
    if T < 1:
        raise ValueError("horizon must have at least one period")
    cal = calibration or PriceCalibration()
    rng = np.random.default_rng([seed, CATEGORIES.index(category)])
    prices = cal.scale(category) * rng.lognormal(cal.mu, cal.sigma, size=T)
    a = rng.uniform(4.0, 6.0)
    b = rng.uniform(1.0, 3.5)
    phi = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(1, T + 1)
    xbar = a + b * np.sin(2 * np.pi * t / T + phi)
    A = rebound_matrix(T, rng)
    (qlo, qhi), (rlo, rhi) = bounds[2], bounds[3]
    q = rng.uniform(qlo, qhi, size=T)
    r = rng.uniform(rlo, rhi, size=T)
    return MarketInstance(prices, xbar, A, q, r, category, seed)


def ingest_prices(text: str) -> dict[str, np.ndarray]:
    """Parse ``scenario,hour,price_dkk_per_mwh`` rows into one vector per scenario."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["scenario", "hour", "price_dkk_per_mwh"]:
        raise ValueError("price CSV must start with header scenario,hour,price_dkk_per_mwh")
    table: dict[str, dict[int, float]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise ValueError(f"line {lineno}: expected 3 fields, got {len(row)}")
        scen, hour_s, price_s = (c.strip() for c in row)
        try:
            hour = int(hour_s)
        except ValueError:
            raise ValueError(f"line {lineno}: hour {hour_s!r} is not an integer") from None
        try:
            price = float(price_s)
        except ValueError:
            raise ValueError(f"line {lineno}: price {price_s!r} is not numeric") from None
        if not math.isfinite(price):
            raise ValueError(f"line {lineno}: price must be finite")
        rows = table.setdefault(scen, {})
        if hour in rows:
            raise ValueError(f"line {lineno}: duplicate row for scenario {scen!r}, hour {hour}")
        rows[hour] = price
    out = {}
    for scen, rows in table.items():
        T = max(rows)
        for h in range(1, T + 1):
            if h not in rows:
                raise ValueError(f"scenario {scen!r} is missing hour {h}")
        if min(rows) < 1:
            raise ValueError(f"scenario {scen!r} has an hour below 1")
        out[scen] = np.array([rows[h] for h in range(1, T + 1)])
    return out


# -- model assembly ----------------------------------------------------------------

@dataclass
class BiddingModel:
    model: OptModel
    method: object
    x: list[int]
    xt: list[int]
    cost: list[int]
    out: list[int]
    embeddings: list[Embedding] = field(default_factory=list)
    penalty: list[tuple[int, float]] = field(default_factory=list)
    # binaries of the no-bid schedule x = 0, always feasible
    start: dict[int, float] = field(default_factory=dict)


def method_label(method) -> str:
    return getattr(method, "label", type(method).__name__.lower())


def _nets_for(nets, T) -> list[ReluNetwork]:
    if isinstance(nets, ReluNetwork):
        return [nets] * T
    nets = list(nets)
    if len(nets) != T:
        raise EmbeddingError(f"need one network per period ({T}), got {len(nets)}")
    return nets


def build_bidding_model(inst: MarketInstance, method, nets=None, eps_u: float = DEFAULT_MARGIN) -> BiddingModel:
    """Maximise market revenue minus surrogate purchase cost (minus any penalty).

    Every method writes its surrogate into a free variable ``f_t``; the
    purchase cost ``lp_t`` is tied to it by ``lp_t >= f_t`` and ``lp_t >= 0``,
    which is exact because the objective pushes ``lp_t`` down.
    """
    T = inst.T
    m = OptModel(f"bidding_{method_label(method)}")
    x = [m.add_variable(f"x_{t}", 0.0, INF) for t in range(1, T + 1)]
    xt = [m.add_variable(f"xt_{t}", 0.0, INF) for t in range(1, T + 1)]
    cost = [m.add_variable(f"lp_{t}", 0.0, INF) for t in range(1, T + 1)]
    out = [m.add_variable(f"f_{t}", -INF, INF) for t in range(1, T + 1)]
    for t in range(T):
        terms = [(xt[t], 1.0)] + [(x[j], float(inst.A[t, j])) for j in range(t) if inst.A[t, j] != 0.0]
        m.add_constraint(f"rebound_{t + 1}", terms, Sense.EQ, float(inst.xbar[t]))
        m.add_constraint(f"cap_{t + 1}", [(x[t], 1.0), (xt[t], -(1.0 - eps_u))], Sense.LE, 0.0)
        m.add_constraint(f"epi_{t + 1}", [(cost[t], 1.0), (out[t], -1.0)], Sense.GE, 0.0)

    bm = BiddingModel(m, method, x, xt, cost, out)
    if isinstance(method, Pwl):
        for t in range(T):
            q, r = float(inst.q[t]), float(inst.r[t])
            spec = tabulate_pwl(lambda xx, tt: purchase_cost(xx, tt, q, r), float(inst.xbar[t]),
                                method.n_pieces, method.eps_u)
            emb = build_pwl(spec, m, x[t], xt[t], out[t], prefix=f"pwl{t + 1}")
            bm.embeddings.append(emb)
            bm.start.update(pwl_start(spec, emb, 0.0, float(inst.xbar[t])))
    else:
        if nets is None:
            raise EmbeddingError("neural surrogate methods need a network")
        per_t = _nets_for(nets, T)
        for t in range(T):
            net = per_t[t]
            q_var = m.add_variable(f"q_{t + 1}", float(inst.q[t]), float(inst.q[t]))
            r_var = m.add_variable(f"r_{t + 1}", float(inst.r[t]), float(inst.r[t]))
            inputs = [x[t], xt[t], q_var, r_var]
            box = [(0.0, (1.0 - eps_u) * inst.xbar[t]), (0.0, inst.xbar[t]),
                   (inst.q[t], inst.q[t]), (inst.r[t], inst.r[t])]
            prefix = f"nn{t + 1}"
            if isinstance(method, CvxdLP):
                emb = embed_cvxd(m, net, inputs, out[t], prefix)
            elif isinstance(method, PCAR):
                emb = embed_pcar(m, net, method.alpha, inputs, out[t], prefix)
            elif isinstance(method, PCTAR):
                emb = embed_pctar(m, net, method.alpha, method.lb, method.ub, inputs, out[t], prefix)
            elif isinstance(method, BigM):
                emb = embed_bigm(m, net, box, inputs, out[t], prefix)
            elif isinstance(method, Hybrid):
                emb = embed_hybrid(m, net, method.k, box, inputs, out[t], prefix)
            else:
                raise EmbeddingError(f"unknown surrogate method {method!r}")
            bm.embeddings.append(emb)
            bm.penalty.extend(emb.penalty)
            if emb.binaries:
                bm.start.update(activation_start(net, emb, [0.0, inst.xbar[t], inst.q[t], inst.r[t]]))

    obj = [(x[t], float(inst.prices[t])) for t in range(T)] + [(cost[t], -1.0) for t in range(T)]
    obj += [(h, -a) for h, a in bm.penalty]
    m.set_objective(obj, ObjSense.MAXIMIZE)
    return bm


def solve_bidding(bm: BiddingModel, opts: BBOptions | None = None) -> SolveResult:
    return solve_mip(bm.model, opts or BBOptions(), start=bm.start or None)


# -- evaluation ------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    method: str
    x: np.ndarray
    xtilde: np.ndarray
    surrogate: np.ndarray
    actual: np.ndarray
    profit: float
    rmse: float
    wall_time: float
    gap: float
    status: str
    forward: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def looseness(self) -> float:
        """Largest |in-model cost - forward-pass cost| over periods (nan without a net)."""
        if self.forward is None:
            return math.nan
        return float(np.max(np.abs(self.surrogate - self.forward))) if self.surrogate.size else 0.0


def forward_cost(nets, x, xt, inst: MarketInstance) -> np.ndarray:
    """Network cost at the decisions, clipped at 0 like the in-model epigraph."""
    per_t = _nets_for(nets, inst.T)
    vals = [relu_forward(n, [x[t], xt[t], inst.q[t], inst.r[t]])[0] for t, n in enumerate(per_t)]
    return np.maximum(np.array(vals, dtype=float), 0.0)


def evaluate_solution(inst: MarketInstance, result: SolveResult, method="", nets=None) -> EvaluationReport:
    T = inst.T
    label = method if isinstance(method, str) else method_label(method)
    try:
        x = np.array([result.value(f"x_{t}") for t in range(1, T + 1)])
        xt = np.array([result.value(f"xt_{t}") for t in range(1, T + 1)])
        sur = np.array([result.value(f"lp_{t}") for t in range(1, T + 1)])
    except KeyError as exc:
        raise ValueError(f"solve result lacks primal value {exc.args[0]!r}") from None
    warnings = []
    actual = np.zeros(T)
    for t in range(T):
        if x[t] <= ZERO_BID:
            continue
        xx = x[t]
        if xx >= xt[t]:
            warnings.append(f"t={t + 1}: bid {xx:.6g} >= available {xt[t]:.6g}, clamped")
            xx = np.nextafter(xt[t], 0.0)
            if xx <= 0:
                continue
        actual[t] = purchase_cost(xx, xt[t], inst.q[t], inst.r[t])
    profit = float(np.sum(inst.prices * x - actual))
    rmse = float(np.sqrt(np.mean((sur - actual) ** 2)))
    fwd = forward_cost(nets, x, xt, inst) if nets is not None else None
    return EvaluationReport(label, x, xt, sur, actual, profit, rmse, result.wall_time, result.gap,
                            result.status.value, fwd, warnings)


def run_method(inst: MarketInstance, method, nets=None, opts: BBOptions | None = None):
    """Build, solve and evaluate; returns (report, result, build_seconds)."""
    t0 = time.perf_counter()
    bm = build_bidding_model(inst, method, nets)
    build = time.perf_counter() - t0
    res = solve_bidding(bm, opts)
    if not res.has_solution:
        T = inst.T
        nan = np.full(T, np.nan)
        rep = EvaluationReport(method_label(method), nan, nan, nan, nan, math.nan, math.nan,
                               res.wall_time, res.gap, res.status.value)
        return rep, res, build
    return evaluate_solution(inst, res, method, nets), res, build


# -- CSV export --------------------------------------------------------------------------

DETAIL_HEADER = ["method", "scenario", "t", "x", "xtilde", "lambdaP_surrogate", "lambdaP_actual"]
SUMMARY_HEADER = ["method", "scenario", "profit", "rmse", "walltime", "gap", "status"]


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _write(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def detail_rows(rep: EvaluationReport, scenario) -> list[list[str]]:
    return [[rep.method, str(scenario), str(t + 1), fmt(rep.x[t]), fmt(rep.xtilde[t]),
             fmt(rep.surrogate[t]), fmt(rep.actual[t])] for t in range(rep.x.size)]


def summary_row(rep: EvaluationReport, scenario) -> list[str]:
    return [rep.method, str(scenario), fmt(rep.profit), fmt(rep.rmse), fmt(rep.wall_time),
            fmt(rep.gap), rep.status]


def detail_csv(reports: Sequence[tuple[EvaluationReport, object]]) -> str:
    rows = []
    for rep, scen in reports:
        rows.extend(detail_rows(rep, scen))
    return _write(rows, DETAIL_HEADER)


def summary_csv(reports: Sequence[tuple[EvaluationReport, object]]) -> str:
    return _write([summary_row(rep, scen) for rep, scen in reports], SUMMARY_HEADER)


__all__ = [
    "DomainError", "PriceCalibration", "MarketInstance", "BiddingModel", "EvaluationReport",
    "responsiveness", "incentive", "purchase_cost", "generate_instance", "ingest_prices",
    "build_bidding_model", "solve_bidding", "evaluate_solution", "forward_cost", "run_method",
    "detail_csv", "summary_csv", "Status",
]
