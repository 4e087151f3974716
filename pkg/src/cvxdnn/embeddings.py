"""Splice trained ReLU networks (or a bivariate PWL table) into an OptModel.

Networks are folded to raw units first, so model variables carry raw
quantities.  Hidden pre-activations are unaffected by folding, which keeps
neuron bounds such as the PCTAR box meaningful in normalised terms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import INF, OptModel, Sense, VarKind
from .network import ReluNetwork, fold_normalization


class EmbeddingError(ValueError):
    pass


# -- method descriptions ----------------------------------------------------

@dataclass(frozen=True)
class CvxdLP:
    label: str = "cvxd-lp"


@dataclass(frozen=True)
class PCAR:
    alpha: object = 1000.0
    label: str = "pcar"


@dataclass(frozen=True)
class PCTAR:
    alpha: object = 1000.0
    lb: float = -10.0
    ub: float = 10.0
    label: str = "pctar"

    def __post_init__(self):
        if not self.lb < 0 < self.ub:
            raise EmbeddingError(f"PCTAR needs LB < 0 < UB, got LB={self.lb}, UB={self.ub}")


@dataclass(frozen=True)
class BigM:
    label: str = "bigm"


@dataclass(frozen=True)
class Hybrid:
    k: int = 2
    label: str = "hybrid"


@dataclass(frozen=True)
class Pwl:
    n_pieces: int = 4
    eps_u: float = 0.01
    label: str = "pwl"


@dataclass
class Embedding:
    """Handles to what a builder added."""

    hidden: list[list[int | None]] = field(default_factory=list)
    binaries: list[int] = field(default_factory=list)
    penalty: list[tuple[int, float]] = field(default_factory=list)
    rows: list[int] = field(default_factory=list)
    aux: list[int] = field(default_factory=list)
    # per hidden layer, the indicator binary of each neuron (None when not encoded with one)
    indicators: list[list[int | None]] = field(default_factory=list)


# -- penalties ----------------------------------------------------------------

_LAYER_RULE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*\^\s*(-?)l\s*$")


def penalty_vectors(net: ReluNetwork, alpha) -> list[np.ndarray]:
    """One non-negative penalty vector per hidden layer.

    ``alpha`` may be a constant, a layer rule string such as ``"5^l"`` or
    ``"2^-l"`` (l counts hidden layers from 1), a callable of l, or an
    explicit per-layer sequence of scalars or vectors.
    """
    sizes = net.layer_sizes[1:-1]
    L = len(sizes)
    if isinstance(alpha, str):
        m = _LAYER_RULE.match(alpha)
        if not m:
            raise EmbeddingError(f"unrecognised penalty rule {alpha!r}")
        base, neg = float(m.group(1)), m.group(2) == "-"
        per_layer = [base ** (-l if neg else l) for l in range(1, L + 1)]
    elif callable(alpha):
        per_layer = [alpha(l) for l in range(1, L + 1)]
    elif np.isscalar(alpha):
        per_layer = [float(alpha)] * L
    else:
        per_layer = list(alpha)
        if len(per_layer) != L:
            raise EmbeddingError(f"need {L} penalty entries (one per hidden layer), got {len(per_layer)}")
    out = []
    for n, a in zip(sizes, per_layer):
        vec = np.broadcast_to(np.asarray(a, dtype=float), (n,)).copy() if np.ndim(a) == 0 else np.asarray(a, dtype=float)
        if vec.shape != (n,):
            raise EmbeddingError(f"penalty vector has shape {vec.shape}, layer has {n} neurons")
        if np.any(vec < 0) or not np.all(np.isfinite(vec)):
            raise EmbeddingError("penalty coefficients must be finite and non-negative")
        out.append(vec)
    return out


def pctar_cap(lb: float, ub: float) -> tuple[float, float]:
    """Slope and intercept of the line through (lb, 0) and (ub, ub)."""
    if not lb < 0 < ub:
        raise EmbeddingError(f"PCTAR needs LB < 0 < UB, got LB={lb}, UB={ub}")
    k1 = ub / (ub - lb)
    k2 = -ub * lb / (ub - lb)
    return k1, k2


# -- bound propagation ----------------------------------------------------------

def propagate_bounds(net: ReluNetwork, box) -> list[tuple[np.ndarray, np.ndarray]]:
    """Interval bounds on every layer's pre-activation for raw inputs in ``box``.

    ``box`` is a sequence of (lo, hi) pairs per input.  The last entry of
    the result bounds the (raw) network output.
    """
    folded = fold_normalization(net)
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if box.shape[0] != net.layer_sizes[0]:
        raise EmbeddingError("input box must give one (lo, hi) pair per network input")
    if not np.all(np.isfinite(box)) or np.any(box[:, 0] > box[:, 1]):
        raise EmbeddingError("input box must be finite with lo <= hi")
    lo, hi = box[:, 0], box[:, 1]
    out = []
    for l, (w, b) in enumerate(zip(folded.weights, folded.biases)):
        wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
        plo = lo @ wp + hi @ wn + b
        phi = hi @ wp + lo @ wn + b
        out.append((plo, phi))
        lo, hi = np.maximum(plo, 0.0), np.maximum(phi, 0.0)
    return out


# -- shared layer encoders ---------------------------------------------------------

def _check_io(net: ReluNetwork, input_vars, output_var):
    if len(input_vars) != net.layer_sizes[0]:
        raise EmbeddingError(f"network takes {net.layer_sizes[0]} inputs, got {len(input_vars)} variables")
    if net.layer_sizes[-1] != 1:
        raise EmbeddingError("only single-output networks can be embedded")
    if output_var is None:
        raise EmbeddingError("an output variable is required")


def _pre_terms(w_col, prev):
    return [(v, float(a)) for v, a in zip(prev, w_col) if v is not None and a != 0.0]


def _relaxed_layer(model, emb, prefix, l, w, b, prev, cap=None):
    """h >= W h_prev + b, h >= 0 (plus the PCTAR cap when given)."""
    layer = []
    for j in range(w.shape[1]):
        h = model.add_variable(f"{prefix}_h{l}_{j}", 0.0, INF)
        terms = _pre_terms(w[:, j], prev)
        emb.rows.append(model.add_constraint(
            f"{prefix}_relu{l}_{j}", [(h, 1.0)] + [(v, -a) for v, a in terms], Sense.GE, b[j]))
        if cap is not None:
            k1, k2 = cap
            emb.rows.append(model.add_constraint(
                f"{prefix}_cap{l}_{j}", [(h, 1.0)] + [(v, -k1 * a) for v, a in terms],
                Sense.LE, k1 * b[j] + k2))
        layer.append(h)
    emb.hidden.append(layer)
    emb.indicators.append([None] * len(layer))
    return layer


def _exact_layer(model, emb, prefix, l, w, b, prev, plo, phi):
    """Big-M encoding of h = max(W h_prev + b, 0) using interval bounds."""
    layer, marks = [], []
    for j in range(w.shape[1]):
        marks.append(None)
        lo, hi = float(plo[j]), float(phi[j])
        terms = _pre_terms(w[:, j], prev)
        if hi <= 0.0:
            layer.append(None)  # dead neuron, constant 0
            continue
        neg = [(v, -a) for v, a in terms]
        if lo >= 0.0:
            h = model.add_variable(f"{prefix}_h{l}_{j}", 0.0, hi)
            emb.rows.append(model.add_constraint(f"{prefix}_lin{l}_{j}", [(h, 1.0)] + neg, Sense.EQ, b[j]))
            layer.append(h)
            continue
        h = model.add_variable(f"{prefix}_h{l}_{j}", 0.0, hi)
        d = model.add_variable(f"{prefix}_d{l}_{j}", 0.0, 1.0, VarKind.BINARY)
        emb.binaries.append(d)
        marks[-1] = d
        emb.rows.append(model.add_constraint(f"{prefix}_ge{l}_{j}", [(h, 1.0)] + neg, Sense.GE, b[j]))
        emb.rows.append(model.add_constraint(
            f"{prefix}_act{l}_{j}", [(h, 1.0), (d, -lo)] + neg, Sense.LE, b[j] - lo))
        emb.rows.append(model.add_constraint(f"{prefix}_off{l}_{j}", [(h, 1.0), (d, -hi)], Sense.LE, 0.0))
        layer.append(h)
    emb.hidden.append(layer)
    emb.indicators.append(marks)
    return layer


def _output_row(model, emb, prefix, w, b, prev, output_var):
    terms = _pre_terms(w[:, 0], prev)
    emb.rows.append(model.add_constraint(
        f"{prefix}_out", [(output_var, 1.0)] + [(v, -a) for v, a in terms], Sense.EQ, float(b[0])))


def _nonneg_from(net: ReluNetwork, k: int) -> bool:
    return all(np.all(net.weights[l - 1] >= 0) for l in range(k + 1, len(net.layer_sizes)))


# -- public builders ----------------------------------------------------------------

def embed_cvxd(model: OptModel, net: ReluNetwork, input_vars: Sequence[int], output_var: int,
               prefix: str = "nn") -> Embedding:
    """LP encoding of a fully convexified network (exact when the output is minimised).

    The caller must make sure the output variable is pushed down by the
    objective; that premise is not checked here.
    """
    if net.convex_from != 1:
        raise EmbeddingError("embed_cvxd needs a network convexified from layer 1")
    _check_io(net, input_vars, output_var)
    folded = fold_normalization(net)
    emb = Embedding()
    prev = list(input_vars)
    for l in range(1, folded.n_hidden + 1):
        prev = _relaxed_layer(model, emb, prefix, l, folded.weights[l - 1], folded.biases[l - 1], prev)
    _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
    return emb


def embed_pcar(model: OptModel, net: ReluNetwork, alpha, input_vars: Sequence[int], output_var: int,
               prefix: str = "nn") -> Embedding:
    """Penalised relaxation for an arbitrary network.

    Returns the penalty terms in ``Embedding.penalty``; the caller adds them
    to a minimisation objective (or subtracts them when maximising).
    """
    _check_io(net, input_vars, output_var)
    alphas = penalty_vectors(net, alpha)
    folded = fold_normalization(net)
    emb = Embedding()
    prev = list(input_vars)
    for l in range(1, folded.n_hidden + 1):
        prev = _relaxed_layer(model, emb, prefix, l, folded.weights[l - 1], folded.biases[l - 1], prev)
        emb.penalty.extend((h, float(a)) for h, a in zip(prev, alphas[l - 1]) if a != 0.0)
    _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
    return emb


def embed_pctar(model: OptModel, net: ReluNetwork, alpha, lb: float, ub: float,
                input_vars: Sequence[int], output_var: int, prefix: str = "nn") -> Embedding:
    """PCAR plus a triangular cap on every hidden neuron."""
    cap = pctar_cap(lb, ub)
    _check_io(net, input_vars, output_var)
    alphas = penalty_vectors(net, alpha)
    folded = fold_normalization(net)
    emb = Embedding()
    prev = list(input_vars)
    for l in range(1, folded.n_hidden + 1):
        prev = _relaxed_layer(model, emb, prefix, l, folded.weights[l - 1], folded.biases[l - 1], prev, cap)
        emb.penalty.extend((h, float(a)) for h, a in zip(prev, alphas[l - 1]) if a != 0.0)
    _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
    return emb


def embed_bigm(model: OptModel, net: ReluNetwork, box, input_vars: Sequence[int], output_var: int,
               prefix: str = "nn") -> Embedding:
    """Exact mixed-binary encoding with per-neuron constants from interval bounds."""
    _check_io(net, input_vars, output_var)
    bounds = propagate_bounds(net, box)
    folded = fold_normalization(net)
    emb = Embedding()
    prev = list(input_vars)
    for l in range(1, folded.n_hidden + 1):
        plo, phi = bounds[l - 1]
        prev = _exact_layer(model, emb, prefix, l, folded.weights[l - 1], folded.biases[l - 1], prev, plo, phi)
    _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
    return emb


def embed_hybrid(model: OptModel, net: ReluNetwork, k: int, box, input_vars: Sequence[int],
                 output_var: int, prefix: str = "nn") -> Embedding:
    """Layers 1..k-1 exact (Big-M), layers k..L relaxed; needs W_l >= 0 for l > k."""
    L = net.n_hidden
    if not 1 <= k <= L + 1:
        raise EmbeddingError(f"hybrid boundary k={k} outside 1..{L + 1}")
    if k <= L and (net.convex_from is None or net.convex_from > k):
        raise EmbeddingError(f"hybrid({k}) needs a network convexified from layer {k} or earlier")
    if not _nonneg_from(net, k):
        raise EmbeddingError(f"network weights beyond layer {k} are not all non-negative")
    if k == 1:
        _check_io(net, input_vars, output_var)
        folded = fold_normalization(net)
        emb = Embedding()
        prev = list(input_vars)
        for l in range(1, L + 1):
            prev = _relaxed_layer(model, emb, prefix, l, folded.weights[l - 1], folded.biases[l - 1], prev)
        _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
        return emb
    _check_io(net, input_vars, output_var)
    bounds = propagate_bounds(net, box)
    folded = fold_normalization(net)
    emb = Embedding()
    prev = list(input_vars)
    for l in range(1, L + 1):
        w, b = folded.weights[l - 1], folded.biases[l - 1]
        if l < k:
            plo, phi = bounds[l - 1]
            prev = _exact_layer(model, emb, prefix, l, w, b, prev, plo, phi)
        else:
            prev = _relaxed_layer(model, emb, prefix, l, w, b, prev)
    _output_row(model, emb, prefix, folded.weights[-1], folded.biases[-1], prev, output_var)
    return emb


# -- bivariate piecewise-linear surrogate -------------------------------------------

@dataclass
class PwlSpec:
    """Cost table over (u = x / xtilde, xtilde) grid vertices."""

    u_grid: np.ndarray
    xt_grid: np.ndarray
    values: np.ndarray  # shape (len(u_grid), len(xt_grid))
    n_pieces: int = 4
    eps_u: float = 0.01

    def __post_init__(self):
        self.u_grid = np.asarray(self.u_grid, dtype=float)
        self.xt_grid = np.asarray(self.xt_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.n_pieces < 1:
            raise EmbeddingError("need at least one piece per axis")
        if np.any(np.diff(self.u_grid) <= 0) or np.any(np.diff(self.xt_grid) <= 0):
            raise EmbeddingError("PWL grid must be strictly increasing on both axes")
        if self.values.shape != (self.u_grid.size, self.xt_grid.size):
            raise EmbeddingError("PWL table shape does not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise EmbeddingError("PWL table values must be finite")


def tabulate_pwl(cost: Callable, xt_max: float, n_pieces: int = 4, eps_u: float = 0.01,
                 xt_min: float = 0.0) -> PwlSpec:
    """Evaluate ``cost(x, xtilde)`` (vectorised) on a uniform (u, xtilde) grid."""
    if n_pieces < 1:
        raise EmbeddingError("need at least one piece per axis")
    if not xt_max > xt_min:
        raise EmbeddingError("degenerate xtilde range for the PWL grid")
    u = np.linspace(0.0, 1.0 - eps_u, n_pieces + 1)
    xt = np.linspace(xt_min, xt_max, n_pieces + 1)
    U, XT = np.meshgrid(u, xt, indexing="ij")
    vals = np.asarray(cost(U * XT, XT), dtype=float)
    return PwlSpec(u, xt, vals, n_pieces, eps_u)


def build_pwl(spec: PwlSpec, model: OptModel, x_var: int, xt_var: int, cost_var: int,
              prefix: str = "pwl") -> Embedding:
    """Convex-combination encoding with one selection binary per grid cell."""
    nu, nt = spec.u_grid.size, spec.xt_grid.size
    emb = Embedding()
    w = np.empty((nu, nt), dtype=int)
    for a in range(nu):
        for c in range(nt):
            w[a, c] = model.add_variable(f"{prefix}_w{a}_{c}", 0.0, 1.0)
    emb.aux = w.ravel().tolist()
    cells = {}
    for a in range(nu - 1):
        for c in range(nt - 1):
            cells[a, c] = model.add_variable(f"{prefix}_y{a}_{c}", 0.0, 1.0, VarKind.BINARY)
    emb.binaries = list(cells.values())
    emb.rows.append(model.add_constraint(f"{prefix}_wsum", [(int(v), 1.0) for v in w.ravel()], Sense.EQ, 1.0))
    emb.rows.append(model.add_constraint(f"{prefix}_ysum", [(v, 1.0) for v in cells.values()], Sense.EQ, 1.0))
    for a in range(nu):
        for c in range(nt):
            owners = [cells[i, j] for i in (a - 1, a) for j in (c - 1, c) if (i, j) in cells]
            emb.rows.append(model.add_constraint(
                f"{prefix}_sup{a}_{c}", [(int(w[a, c]), 1.0)] + [(y, -1.0) for y in owners], Sense.LE, 0.0))
    U, XT = np.meshgrid(spec.u_grid, spec.xt_grid, indexing="ij")
    X = U * XT
    flat = w.ravel().tolist()
    emb.rows.append(model.add_constraint(
        f"{prefix}_x", [(x_var, 1.0)] + [(v, -float(a)) for v, a in zip(flat, X.ravel())], Sense.EQ, 0.0))
    emb.rows.append(model.add_constraint(
        f"{prefix}_xt", [(xt_var, 1.0)] + [(v, -float(a)) for v, a in zip(flat, XT.ravel())], Sense.EQ, 0.0))
    emb.rows.append(model.add_constraint(
        f"{prefix}_cost", [(cost_var, 1.0)] + [(v, -float(a)) for v, a in zip(flat, spec.values.ravel())],
        Sense.EQ, 0.0))
    return emb


# -- MIP starts ----------------------------------------------------------------------

def activation_start(net: ReluNetwork, emb: Embedding, z) -> dict[int, float]:
    """Indicator values matching the network's activation pattern at raw input ``z``."""
    folded = fold_normalization(net)
    h = np.asarray(z, dtype=float)
    start = {}
    for l, marks in enumerate(emb.indicators):
        pre = h @ folded.weights[l] + folded.biases[l]
        for j, d in enumerate(marks):
            if d is not None:
                start[d] = 1.0 if pre[j] > 0.0 else 0.0
        h = np.maximum(pre, 0.0)
    return start


def pwl_start(spec: PwlSpec, emb: Embedding, u: float, xt: float) -> dict[int, float]:
    """Select the grid cell containing (u, xtilde)."""
    nc = spec.xt_grid.size - 1
    a = int(np.clip(np.searchsorted(spec.u_grid, u, side="right") - 1, 0, spec.u_grid.size - 2))
    c = int(np.clip(np.searchsorted(spec.xt_grid, xt, side="right") - 1, 0, nc - 1))
    chosen = a * nc + c
    return {y: 1.0 if k == chosen else 0.0 for k, y in enumerate(emb.binaries)}
