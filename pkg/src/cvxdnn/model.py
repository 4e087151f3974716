"""Solver-agnostic linear / mixed-binary model and LP-format export."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable

INF = math.inf


class VarKind(enum.Enum):
    CONTINUOUS = "Continuous"
    BINARY = "Binary"


class Sense(enum.Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class ObjSense(enum.Enum):
    MINIMIZE = "Minimize"
    MAXIMIZE = "Maximize"


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    TIME_LIMIT = "TimeLimit"
    GAP_REACHED = "GapReached"
    ITERATION_LIMIT = "IterationLimit"


class ModelError(ValueError):
    pass


@dataclass
class Variable:
    name: str
    lower: float
    upper: float
    kind: VarKind


@dataclass
class Constraint:
    name: str
    terms: list[tuple[int, float]]
    sense: Sense
    rhs: float


@dataclass
class Objective:
    sense: ObjSense = ObjSense.MINIMIZE
    terms: list[tuple[int, float]] = field(default_factory=list)
    constant: float = 0.0


def _coalesce(terms: Iterable[tuple[int, float]], n_vars: int, what: str) -> list[tuple[int, float]]:
    acc: dict[int, float] = {}
    for j, a in terms:
        j = int(j)
        a = float(a)
        if not 0 <= j < n_vars:
            raise ModelError(f"{what}: unknown variable index {j}")
        if not math.isfinite(a):
            raise ModelError(f"{what}: non-finite coefficient {a} on variable {j}")
        acc[j] = acc.get(j, 0.0) + a
    return list(acc.items())


class OptModel:
    """Variables, linear rows and a linear objective.

    Variable and constraint handles are plain integer positions, stable for
    the lifetime of the model.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective = Objective()
        self._index: dict[str, int] = {}

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_cons(self) -> int:
        return len(self.constraints)

    def add_variable(self, name: str, lower: float = 0.0, upper: float = INF,
                     kind: VarKind = VarKind.CONTINUOUS) -> int:
        if name in self._index:
            raise ModelError(f"duplicate variable name {name!r}")
        lower, upper = float(lower), float(upper)
        if math.isnan(lower) or math.isnan(upper):
            raise ModelError(f"variable {name!r} has NaN bounds")
        if lower > upper:
            raise ModelError(f"variable {name!r} has inverted bounds [{lower}, {upper}]")
        if kind is VarKind.BINARY and (lower < 0 or upper > 1):
            raise ModelError(f"binary variable {name!r} needs bounds within [0, 1]")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, lower, upper, kind))
        return len(self.variables) - 1

    def add_constraint(self, name: str, terms: Iterable[tuple[int, float]], sense: Sense,
                       rhs: float) -> int:
        rhs = float(rhs)
        if not math.isfinite(rhs):
            raise ModelError(f"constraint {name!r} has non-finite right-hand side")
        self.constraints.append(
            Constraint(name, _coalesce(terms, self.n_vars, f"constraint {name!r}"), Sense(sense), rhs))
        return len(self.constraints) - 1

    def set_objective(self, terms: Iterable[tuple[int, float]], sense: ObjSense = ObjSense.MINIMIZE,
                      constant: float = 0.0):
        constant = float(constant)
        if not math.isfinite(constant):
            raise ModelError("objective constant must be finite")
        self.objective = Objective(ObjSense(sense), _coalesce(terms, self.n_vars, "objective"), constant)

    def add_objective_terms(self, terms: Iterable[tuple[int, float]]):
        merged = list(self.objective.terms) + list(terms)
        self.objective.terms = _coalesce(merged, self.n_vars, "objective")

    def var(self, name: str) -> int:
        return self._index[name]

    def set_bounds(self, j: int, lower: float, upper: float):
        v = self.variables[j]
        if lower > upper:
            raise ModelError(f"variable {v.name!r} has inverted bounds [{lower}, {upper}]")
        if v.kind is VarKind.BINARY and (lower < 0 or upper > 1):
            raise ModelError(f"binary variable {v.name!r} needs bounds within [0, 1]")
        v.lower, v.upper = float(lower), float(upper)

    @property
    def binaries(self) -> list[int]:
        return [j for j, v in enumerate(self.variables) if v.kind is VarKind.BINARY]

    def validate(self):
        """Re-check every invariant; raises ModelError naming the offender."""
        seen = set()
        for v in self.variables:
            if v.name in seen:
                raise ModelError(f"duplicate variable name {v.name!r}")
            seen.add(v.name)
            if math.isnan(v.lower) or math.isnan(v.upper) or v.lower > v.upper:
                raise ModelError(f"variable {v.name!r} has invalid bounds [{v.lower}, {v.upper}]")
            if v.kind is VarKind.BINARY and (v.lower < 0 or v.upper > 1):
                raise ModelError(f"binary variable {v.name!r} needs bounds within [0, 1]")
        for c in self.constraints:
            if not math.isfinite(c.rhs):
                raise ModelError(f"constraint {c.name!r} has non-finite right-hand side")
            _coalesce(c.terms, self.n_vars, f"constraint {c.name!r}")
        _coalesce(self.objective.terms, self.n_vars, "objective")
        if not math.isfinite(self.objective.constant):
            raise ModelError("objective constant must be finite")

    def evaluate_objective(self, values) -> float:
        return self.objective.constant + sum(a * values[j] for j, a in self.objective.terms)

    def row_activity(self, i: int, values) -> float:
        return sum(a * values[j] for j, a in self.constraints[i].terms)

    def max_violation(self, values) -> float:
        """Largest bound or row violation of a full primal vector (by index)."""
        worst = 0.0
        for j, v in enumerate(self.variables):
            worst = max(worst, v.lower - values[j], values[j] - v.upper)
        for i, c in enumerate(self.constraints):
            act = self.row_activity(i, values)
            if c.sense is Sense.LE:
                worst = max(worst, act - c.rhs)
            elif c.sense is Sense.GE:
                worst = max(worst, c.rhs - act)
            else:
                worst = max(worst, abs(act - c.rhs))
        return worst


def _num(a: float) -> str:
    return format(a, ".17g")


def _linear(terms, variables) -> str:
    parts = []
    for j, a in terms:
        name = variables[j].name
        if a == 1.0:
            txt = f"+ {name}"
        elif a == -1.0:
            txt = f"- {name}"
        elif a < 0:
            txt = f"- {_num(-a)} {name}"
        else:
            txt = f"+ {_num(a)} {name}"
        parts.append(txt)
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else "-" + text[2:]


def write_lp_text(model: OptModel) -> str:
    """CPLEX-style LP text; byte-identical for structurally identical models."""
    model.validate()
    vs = model.variables
    out = [f"\\ {model.name}", model.objective.sense.value]
    obj = _linear(model.objective.terms, vs)
    if model.objective.constant != 0.0:
        c = model.objective.constant
        obj += (" + " if c > 0 else " - ") + _num(abs(c))
    out.append(f" obj: {obj}")
    out.append("Subject To")
    for c in model.constraints:
        out.append(f" {c.name}: {_linear(c.terms, vs)} {c.sense.value} {_num(c.rhs)}")
    out.append("Bounds")
    for v in vs:
        lo, hi = v.lower, v.upper
        if lo == -INF and hi == INF:
            out.append(f" {v.name} free")
        elif hi == INF:
            out.append(f" {v.name} >= {_num(lo)}")
        elif lo == -INF:
            out.append(f" -inf <= {v.name} <= {_num(hi)}")
        elif lo == hi:
            out.append(f" {v.name} = {_num(lo)}")
        else:
            out.append(f" {_num(lo)} <= {v.name} <= {_num(hi)}")
    bins = [v.name for v in vs if v.kind is VarKind.BINARY]
    if bins:
        out.append("Binaries")
        out.extend(f" {b}" for b in bins)
    out.append("End")
    return "\n".join(out) + "\n"


@dataclass
class SolveResult:
    status: Status
    objective: float = math.nan
    best_bound: float = math.nan
    gap: float = math.inf
    primal: dict[str, float] = field(default_factory=dict)
    simplex_iterations: int = 0
    bb_nodes: int = 0
    wall_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def value(self, name: str) -> float:
        return self.primal[name]

    @property
    def has_solution(self) -> bool:
        return bool(self.primal)
