"""Experiment harness: method comparison, penalty sweeps and architecture sweeps.

Every table written here is a pure function of the plan, so repeated runs
give byte-identical files.  Wall-clock figures go to separate ``timing``
files, which are the only outputs expected to differ between runs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .branch_bound import BBOptions
from .embeddings import _LAYER_RULE, BigM, CvxdLP, EmbeddingError, Hybrid, PCAR, PCTAR, Pwl
from .market import (CATEGORIES, MarketInstance, detail_rows, fmt, generate_instance, ingest_prices,
                     purchase_cost, run_method)
from .network import ReluNetwork, TrainConfig, fit, init_network, make_dataset

PLAN_VERSION = 1
BASELINE = (10, 20, 10)
CONSTANT_PENALTIES = (0.01, 1.0, 10.0, 1000.0)
LAYER_PENALTIES = ("5^l", "2^l", "2^-l", "5^-l", "10^-l")
PENALTY_GRID = CONSTANT_PENALTIES + LAYER_PENALTIES
WIDTHS = (20, 80, 200, 400)
DEPTH_ARCHITECTURES = ((40,), (20, 20), (5, 15, 15, 5), (2, 8, 20, 8, 2))
SOLVED = ("Optimal", "GapReached")


class PlanError(ValueError):
    pass


# -- methods -----------------------------------------------------------------------

METHOD_NAMES = ("cvxd-lp", "pcar", "pctar", "bigm", "hybrid", "pwl")
_METHOD_KEYS = {
    "cvxd-lp": set(), "pcar": {"alpha"}, "pctar": {"alpha", "lb", "ub"},
    "bigm": set(), "hybrid": {"k"}, "pwl": {"np"},
}


def _parse_alpha(a):
    if isinstance(a, str):
        try:
            a = float(a)
        except ValueError:
            if not _LAYER_RULE.match(a):
                raise PlanError(f"penalty {a!r} is neither a number nor a layer rule such as 5^l") from None
            return a
    if isinstance(a, (int, float)) and not (math.isfinite(a) and a >= 0):
        raise PlanError(f"penalty must be finite and non-negative, got {a!r}")
    return a


def make_method(name: str, alpha=1000.0, lb=-10.0, ub=10.0, k=2, n_pieces=4):
    if name == "cvxd-lp":
        return CvxdLP()
    if name == "pcar":
        return PCAR(_parse_alpha(alpha))
    if name == "pctar":
        return PCTAR(_parse_alpha(alpha), float(lb), float(ub))
    if name == "bigm":
        return BigM()
    if name == "hybrid":
        return Hybrid(int(k))
    if name == "pwl":
        return Pwl(int(n_pieces))
    raise PlanError(f"unknown method {name!r}; choose from {', '.join(METHOD_NAMES)}")


def method_from_dict(d: dict):
    if not isinstance(d, dict) or "name" not in d:
        raise PlanError("each method entry needs a 'name'")
    name = d["name"]
    if name not in _METHOD_KEYS:
        raise PlanError(f"unknown method {name!r}; choose from {', '.join(METHOD_NAMES)}")
    extra = set(d) - {"name"} - _METHOD_KEYS[name]
    if extra:
        raise PlanError(f"unknown key {sorted(extra)[0]!r} for method {name!r}")
    if name in ("pcar", "pctar") and "alpha" not in d:
        raise PlanError(f"method {name!r} needs a penalty setting 'alpha'")
    return make_method(name, d.get("alpha", 1000.0), d.get("lb", -10.0), d.get("ub", 10.0),
                       d.get("k", 2), d.get("np", 4))


def describe(method) -> str:
    if isinstance(method, PCAR):
        return f"pcar(alpha={method.alpha})"
    if isinstance(method, PCTAR):
        return f"pctar(alpha={method.alpha},lb={method.lb:g},ub={method.ub:g})"
    if isinstance(method, Hybrid):
        return f"hybrid(k={method.k})"
    if isinstance(method, Pwl):
        return f"pwl(np={method.n_pieces})"
    return method.label


def net_kind_for(method, n_hidden: int):
    """Which trained network a method consumes: convexification boundary, None for UC, or no net."""
    if isinstance(method, Pwl):
        return "none"
    if isinstance(method, CvxdLP):
        return 1
    if isinstance(method, Hybrid):
        return method.k if method.k <= n_hidden else None
    return None


# -- plan ----------------------------------------------------------------------------

@dataclass
class ScenarioSet:
    categories: list = field(default_factory=lambda: ["low"])
    count: int = 1
    T: int = 24
    seed: int = 0
    prices_csv: str | None = None

    def instances(self) -> list[tuple[str, MarketInstance]]:
        out = []
        if self.prices_csv:
            with open(self.prices_csv, encoding="utf-8") as fh:
                series = ingest_prices(fh.read())
            for i, (sid, prices) in enumerate(sorted(series.items())):
                base = generate_instance("low", prices.size, self.seed + i)
                out.append((sid, MarketInstance(prices, base.xbar, base.A, base.q, base.r, "low", base.seed)))
            return out
        for cat in self.categories:
            for i in range(self.count):
                out.append((f"{cat}-{self.seed + i}", generate_instance(cat, self.T, self.seed + i)))
        return out


@dataclass
class TrainingSpec:
    n: int = 30_000
    epochs: int = 300
    lr: float = 1e-4
    batch: int = 1000


@dataclass
class SolverSpec:
    time_limit: float = 600.0
    gap: float = 0.01


@dataclass
class ExperimentPlan:
    scenarios: ScenarioSet = field(default_factory=ScenarioSet)
    methods: list = field(default_factory=lambda: [CvxdLP(), BigM()])
    architectures: list = field(default_factory=lambda: [BASELINE])
    penalty_grid: list = field(default_factory=lambda: list(PENALTY_GRID))
    training: TrainingSpec = field(default_factory=TrainingSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    seed: int = 0
    out_dir: str = "results"
    jobs: int = 1

    def __post_init__(self):
        if not self.methods:
            raise PlanError("plan needs at least one method")
        if self.scenarios.count < 1 and not self.scenarios.prices_csv:
            raise PlanError("plan needs at least one scenario")
        for c in self.scenarios.categories:
            if c not in CATEGORIES:
                raise PlanError(f"unknown category {c!r}")
        if not self.architectures or any(len(a) < 1 or min(a) < 1 for a in self.architectures):
            raise PlanError("architectures must be non-empty lists of positive widths")
        if self.jobs < 1:
            raise PlanError("jobs must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        known = {"version", "scenarios", "methods", "architectures", "penalty_grid", "training",
                 "solver", "seed", "out_dir", "jobs"}
        _reject(d, known, "plan")
        if d.get("version", PLAN_VERSION) != PLAN_VERSION:
            raise PlanError(f"unsupported plan version {d.get('version')!r}")
        kw = {}
        if "scenarios" in d:
            _reject(d["scenarios"], {f for f in ScenarioSet.__dataclass_fields__}, "scenarios")
            kw["scenarios"] = ScenarioSet(**d["scenarios"])
        if "training" in d:
            _reject(d["training"], set(TrainingSpec.__dataclass_fields__), "training")
            kw["training"] = TrainingSpec(**d["training"])
        if "solver" in d:
            _reject(d["solver"], set(SolverSpec.__dataclass_fields__), "solver")
            kw["solver"] = SolverSpec(**d["solver"])
        if "methods" in d:
            kw["methods"] = [method_from_dict(m) for m in d["methods"]]
        if "architectures" in d:
            kw["architectures"] = [tuple(int(n) for n in a) for a in d["architectures"]]
        if "penalty_grid" in d:
            kw["penalty_grid"] = [_parse_alpha(a) for a in d["penalty_grid"]]
        for key in ("seed", "out_dir", "jobs"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise PlanError(f"plan is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise PlanError("plan must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "version": PLAN_VERSION,
            "scenarios": asdict(self.scenarios),
            "methods": [describe(m) for m in self.methods],
            "architectures": [list(a) for a in self.architectures],
            "penalty_grid": [str(a) for a in self.penalty_grid],
            "training": asdict(self.training),
            "solver": asdict(self.solver),
            "seed": self.seed,
        }


def _reject(d, known, where):
    if not isinstance(d, dict):
        raise PlanError(f"{where} must be a JSON object")
    extra = set(d) - set(known)
    if extra:
        raise PlanError(f"unknown key {sorted(extra)[0]!r} in {where}")


def default_plan(out_dir="results", seed=0) -> ExperimentPlan:
    """Small plan that finishes in about a minute on a laptop."""
    return ExperimentPlan(
        scenarios=ScenarioSet(["low", "medium"], count=1, T=4, seed=seed),
        methods=[CvxdLP(), PCAR(0.01), PCTAR(1000.0), BigM(), Hybrid(2), Pwl(4)],
        training=TrainingSpec(n=30_000, epochs=300),
        solver=SolverSpec(time_limit=600.0, gap=0.01),
        seed=seed,
        out_dir=str(out_dir),
    )


def width_architectures(widths=WIDTHS, ratio=(1, 2, 1)) -> list[tuple[int, ...]]:
    """Split each total neuron count across layers in the baseline's proportions."""
    out = []
    for w in widths:
        parts = [w * p / sum(ratio) for p in ratio]
        if any(p != int(p) or p < 1 for p in parts):
            raise PlanError(f"width {w} does not split evenly in ratio {ratio}")
        out.append(tuple(int(p) for p in parts))
    return out


# -- networks ------------------------------------------------------------------------------

class NetCache:
    """Trained networks keyed by architecture, kind and training settings."""

    def __init__(self, training: TrainingSpec, seed: int, directory=None, log=None):
        self.training = training
        self.seed = seed
        self.directory = Path(directory) if directory else None
        self.log = log
        self._mem: dict = {}
        self._data = None

    def data(self):
        if self._data is None:
            self._data = make_dataset(purchase_cost, n=self.training.n, seed=self.seed)
        return self._data

    def key(self, arch, convex_from) -> str:
        kind = "uc" if convex_from is None else f"cvxd{convex_from}"
        t = self.training
        return f"{'-'.join(map(str, arch))}_{kind}_n{t.n}_e{t.epochs}_lr{t.lr:g}_b{t.batch}_s{self.seed}"

    def get(self, arch, convex_from):
        key = self.key(arch, convex_from)
        if key in self._mem:
            return self._mem[key]
        path = self.directory / f"{key}.json" if self.directory else None
        if path is not None and path.exists():
            with open(path, encoding="utf-8") as fh:
                blob = json.load(fh)
            entry = (ReluNetwork.from_dict(blob["network"]), blob["train_rmse"])
        else:
            net = init_network([4, *arch, 1], convex_from, seed=self.seed)
            cfg = TrainConfig(learning_rate=self.training.lr, epochs=self.training.epochs,
                              batch_size=self.training.batch, seed=self.seed)
            if self.log:
                self.log(f"training {key}")
            rep = fit(net, self.data(), cfg)
            entry = (net, rep.train_rmse_raw)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "w", encoding="utf-8", newline="\n") as fh:
                    json.dump({"network": net.to_dict(), "train_rmse": rep.train_rmse_raw}, fh)
        self._mem[key] = entry
        return entry


# -- running cells -----------------------------------------------------------------------------

@dataclass
class Cell:
    method: object
    label: str
    scenario: str
    category: str
    inst: MarketInstance
    net: ReluNetwork | None
    arch: tuple
    train_rmse: float
    penalty: str = ""


@dataclass
class RunRecord:
    label: str
    scenario: str
    category: str
    arch: str
    penalty: str
    profit: float
    rmse: float
    gap: float
    status: str
    looseness: float
    train_rmse: float
    walltime: float
    build_time: float
    nodes: int
    detail: list
    error: str = ""


def _run_cell(cell: Cell, opts: BBOptions) -> RunRecord:
    arch = "-".join(map(str, cell.arch)) if cell.net is not None else ""
    try:
        rep, res, build = run_method(cell.inst, cell.method, cell.net, opts)
    except (EmbeddingError, ValueError, ArithmeticError) as exc:
        return RunRecord(cell.label, cell.scenario, cell.category, arch, cell.penalty, math.nan,
                         math.nan, math.inf, "Error", math.nan, cell.train_rmse, 0.0, 0.0, 0, [],
                         f"{type(exc).__name__}: {exc}")
    rep.method = cell.label
    detail = detail_rows(rep, cell.scenario) if res.has_solution else []
    return RunRecord(cell.label, cell.scenario, cell.category, arch, cell.penalty, rep.profit, rep.rmse,
                     rep.gap, rep.status, rep.looseness, cell.train_rmse, res.wall_time, build,
                     res.bb_nodes, detail)


def _run_cells(cells, opts: BBOptions, jobs: int, log=None) -> list[RunRecord]:
    if jobs <= 1:
        out = []
        for c in cells:
            out.append(_run_cell(c, opts))
            if log:
                r = out[-1]
                log(f"{r.label} {r.scenario} {r.status} profit={r.profit:.4f} time={r.walltime:.3f}s")
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_run_cell, c, opts) for c in cells]
        out = [f.result() for f in futures]
    if log:
        for r in out:
            log(f"{r.label} {r.scenario} {r.status} profit={r.profit:.4f} time={r.walltime:.3f}s")
    return out


def _options(plan: ExperimentPlan) -> BBOptions:
    return BBOptions(time_limit=plan.solver.time_limit, gap=plan.solver.gap, seed=plan.seed)


def _cells(plan, cache, methods, archs, scenarios, penalty_of=lambda m: ""):
    cells = []
    for arch in archs:
        for method in methods:
            kind = net_kind_for(method, len(arch))
            if kind == "none":
                net, trmse = None, math.nan
            else:
                net, trmse = cache.get(arch, kind)
            for sid, inst in scenarios:
                cells.append(Cell(method, describe(method), sid, inst.category, inst, net, tuple(arch),
                                  trmse, penalty_of(method)))
        if all(net_kind_for(m, len(arch)) == "none" for m in methods):
            break
    return cells


# -- tables -------------------------------------------------------------------------------------

RUN_HEADER = ["method", "scenario", "category", "arch", "penalty", "profit", "rmse", "gap", "status",
              "looseness", "train_rmse", "error"]
TIMING_HEADER = ["method", "scenario", "arch", "penalty", "walltime", "build_time", "nodes"]
SUMMARY_HEADER = ["method", "category", "arch", "scenarios", "solved", "mean_profit", "mean_rmse",
                  "mean_gap", "mean_gap_solved", "max_looseness", "train_rmse"]
DETAIL_HEADER = ["method", "scenario", "t", "x", "xtilde", "lambdaP_surrogate", "lambdaP_actual"]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _mean(vals):
    vals = [v for v in vals if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_row(r: RunRecord) -> list[str]:
    return [r.label, r.scenario, r.category, r.arch, r.penalty, fmt(r.profit), fmt(r.rmse), fmt(r.gap),
            r.status, fmt(r.looseness), fmt(r.train_rmse), r.error]


def timing_row(r: RunRecord) -> list[str]:
    return [r.label, r.scenario, r.arch, r.penalty, fmt(r.walltime), fmt(r.build_time), str(r.nodes)]


def summarize(records: list[RunRecord]) -> list[dict]:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.label, r.category, r.arch), []).append(r)
    out = []
    for (label, cat, arch), rs in groups.items():
        solved = [r for r in rs if r.status in SOLVED]
        gaps = [min(r.gap, 1e300) for r in rs]
        out.append({
            "method": label, "category": cat, "arch": arch, "scenarios": len(rs), "solved": len(solved),
            "mean_profit": _mean([r.profit for r in rs]),
            "mean_rmse": _mean([r.rmse for r in rs]),
            "mean_gap": _mean(gaps),
            "mean_gap_solved": _mean([r.gap for r in solved]),
            "max_looseness": max((r.looseness for r in rs if not math.isnan(r.looseness)), default=math.nan),
            "train_rmse": rs[0].train_rmse,
            "mean_walltime": _mean([r.walltime for r in rs]),
            "median_walltime": statistics.median([r.walltime for r in rs]),
        })
    return out


def _summary_rows(summary):
    return [[s["method"], s["category"], s["arch"], str(s["scenarios"]), str(s["solved"]),
             fmt(s["mean_profit"]), fmt(s["mean_rmse"]), fmt(s["mean_gap"]), fmt(s["mean_gap_solved"]),
             fmt(s["max_looseness"]), fmt(s["train_rmse"])] for s in summary]


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _safe(name: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
    return keep.strip("_") or hashlib.sha1(name.encode()).hexdigest()[:8]


@dataclass
class BenchOutput:
    records: list[RunRecord]
    summary: list[dict]
    files: dict[str, Path]


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(plan: ExperimentPlan, records, out_dir: Path, stem: str, extra_json=None) -> BenchOutput:
    summary = summarize(records)
    files = {
        "summary": out_dir / f"{stem}.csv",
        "runs": out_dir / f"{stem}_runs.csv",
        "detail": out_dir / "detail.csv" if stem == "summary" else out_dir / f"{stem}_detail.csv",
        "json": out_dir / f"{stem}.json",
        "timing": out_dir / f"{stem}_timing.csv" if stem != "summary" else out_dir / "timing.csv",
    }
    _write_text(files["summary"], _csv(SUMMARY_HEADER, _summary_rows(summary)))
    _write_text(files["runs"], _csv(RUN_HEADER, [run_row(r) for r in records]))
    detail = [row for r in records for row in r.detail]
    _write_text(files["detail"], _csv(DETAIL_HEADER, detail))
    _write_text(files["timing"], _csv(TIMING_HEADER, [timing_row(r) for r in records]))
    if stem == "summary":
        for r in records:
            name = _safe(f"{r.label}__{r.scenario}" + (f"__{r.arch}" if r.arch else ""))
            _write_text(out_dir / "details" / f"{name}.csv", _csv(DETAIL_HEADER, r.detail))
    deterministic = [{k: _jsonable(v) for k, v in s.items() if k not in ("mean_walltime", "median_walltime")}
                     for s in summary]
    blob = {
        "version": PLAN_VERSION,
        "seed": plan.seed,
        "plan": plan.to_dict(),
        "summary": deterministic,
        "runs": [{k: _jsonable(v) for k, v in zip(RUN_HEADER, [r.label, r.scenario, r.category, r.arch,
                  r.penalty, r.profit, r.rmse, r.gap, r.status, r.looseness, r.train_rmse, r.error])}
                 for r in records],
    }
    if extra_json:
        blob.update(extra_json)
    _write_text(files["json"], json.dumps(blob, indent=1, sort_keys=True) + "\n")
    return BenchOutput(records, summary, files)


# -- public entry points ---------------------------------------------------------------------------

def run_benchmark(plan: ExperimentPlan, log=None) -> BenchOutput:
    """Every method on every scenario for each architecture in the plan."""
    out_dir = Path(plan.out_dir)
    cache = NetCache(plan.training, plan.seed, out_dir / "nets", log)
    scenarios = plan.scenarios.instances()
    cells = _cells(plan, cache, plan.methods, plan.architectures, scenarios)
    records = _run_cells(cells, _options(plan), plan.jobs, log)
    return _emit(plan, records, out_dir, "summary")


def best_penalty(records: list[RunRecord]) -> dict[tuple[str, str], RunRecord]:
    """Per (method family, scenario): highest realised profit, then lowest runtime."""
    best = {}
    for r in records:
        if math.isnan(r.profit):
            continue
        key = (r.label.split("(")[0], r.scenario)
        cur = best.get(key)
        if cur is None or (r.profit, -r.walltime) > (cur.profit, -cur.walltime):
            best[key] = r
    return best


def penalty_sweep(plan: ExperimentPlan, families=("pcar",), grid=None, include_zero=False,
                  lb=-10.0, ub=10.0, log=None) -> BenchOutput:
    """PCAR / PCTAR over a penalty grid, using the plan's first architecture."""
    grid = list(plan.penalty_grid if grid is None else grid)
    if include_zero:
        grid = [0.0] + grid
    methods = []
    for fam in families:
        if fam not in ("pcar", "pctar"):
            raise PlanError(f"penalty sweeps apply to pcar and pctar, not {fam!r}")
        for a in grid:
            methods.append(make_method(fam, a, lb, ub))
    out_dir = Path(plan.out_dir)
    cache = NetCache(plan.training, plan.seed, out_dir / "nets", log)
    scenarios = plan.scenarios.instances()
    cells = _cells(plan, cache, methods, plan.architectures[:1], scenarios, lambda m: str(m.alpha))
    records = _run_cells(cells, _options(plan), plan.jobs, log)
    best = best_penalty(records)
    extra = {"best_penalty": [{"family": k[0], "scenario": k[1], "penalty": r.penalty,
                               "profit": _jsonable(r.profit)} for k, r in sorted(best.items())]}
    return _emit(plan, records, out_dir, "sweep", extra)


def architecture_sweep(plan: ExperimentPlan, architectures=None, log=None) -> BenchOutput:
    """Train UC and convexified nets for each architecture and run the plan's methods."""
    archs = [tuple(a) for a in (architectures or plan.architectures)]
    out_dir = Path(plan.out_dir)
    cache = NetCache(plan.training, plan.seed, out_dir / "nets", log)
    scenarios = plan.scenarios.instances()
    methods = [m for m in plan.methods if not isinstance(m, Pwl)]
    cells = []
    for arch in archs:
        cells.extend(_cells(plan, cache, methods, [arch], scenarios))
    records = _run_cells(cells, _options(plan), plan.jobs, log)
    train = [{"arch": "-".join(map(str, a)), "uc_train_rmse": cache.get(a, None)[1],
              "cvxd_train_rmse": cache.get(a, 1)[1]} for a in archs]
    return _emit(plan, records, out_dir, "arch", {"training": train})


def format_table(summary: list[dict]) -> str:
    cols = ["method", "category", "arch", "solved", "mean_profit", "mean_walltime", "mean_gap", "mean_rmse"]
    rows = [[str(s["solved"]) + "/" + str(s["scenarios"]) if c == "solved" else
             (f"{s[c]:.4g}" if isinstance(s[c], float) else str(s[c])) for c in cols] for s in summary]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


__all__ = [
    "ExperimentPlan", "ScenarioSet", "TrainingSpec", "SolverSpec", "PlanError", "NetCache",
    "run_benchmark", "penalty_sweep", "architecture_sweep", "best_penalty", "default_plan",
    "width_architectures", "make_method", "method_from_dict", "describe", "format_table",
    "PENALTY_GRID", "DEPTH_ARCHITECTURES", "WIDTHS", "BASELINE",
]
