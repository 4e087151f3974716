"""Dense ReLU networks: forward pass, datasets, min-max scaling and Adam training.

Weights are stored as ``W[l]`` with shape ``(n_{l-1}, n_l)`` so that a layer
computes ``h @ W + b``.  A network is *convexified* from boundary ``k`` when
every weight matrix from layer ``k + 1`` up to the output layer is
element-wise non-negative; ``k = 1`` leaves only the first layer free.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def relu(z):
    return np.maximum(z, 0.0)


@dataclass
class ReluNetwork:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # None means unconstrained; an integer k means layers k+1..L+1 are non-negative.
    convex_from: int | None = None
    input_min: np.ndarray | None = None
    input_max: np.ndarray | None = None
    output_min: float = 0.0
    output_max: float = 1.0

    def __post_init__(self):
        self.layer_sizes = [int(n) for n in self.layer_sizes]
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        if self.input_min is None:
            self.input_min = np.zeros(self.layer_sizes[0])
        if self.input_max is None:
            self.input_max = np.ones(self.layer_sizes[0])
        self.input_min = np.asarray(self.input_min, dtype=float).reshape(-1)
        self.input_max = np.asarray(self.input_max, dtype=float).reshape(-1)
        self.output_min = float(self.output_min)
        self.output_max = float(self.output_max)
        self.check()

    @property
    def n_hidden(self) -> int:
        """Number of hidden ReLU layers (L)."""
        return len(self.layer_sizes) - 2

    @property
    def is_convexified(self) -> bool:
        return self.convex_from is not None

    def check(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise ShapeError(f"invalid layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ShapeError("need one weight matrix and bias vector per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            if w.shape != (sizes[l - 1], sizes[l]):
                raise ShapeError(f"W_{l} has shape {w.shape}, expected {(sizes[l - 1], sizes[l])}")
            if b.shape != (sizes[l],):
                raise ShapeError(f"b_{l} has shape {b.shape}, expected {(sizes[l],)}")
        if self.input_min.shape != (sizes[0],) or self.input_max.shape != (sizes[0],):
            raise ShapeError("input normalisation must have one (min, max) pair per feature")
        if np.any(self.input_max <= self.input_min):
            raise ShapeError("input normalisation needs max > min for every feature")
        if self.output_max < self.output_min:
            raise ShapeError("output normalisation needs max >= min")
        if self.convex_from is not None:
            k = self.convex_from
            if not 1 <= k <= self.n_hidden + 1:
                raise ShapeError(f"convexification boundary k={k} outside 1..{self.n_hidden + 1}")
            for l in self.constrained_layers():
                if np.any(self.weights[l - 1] < 0):
                    raise ShapeError(f"W_{l} has negative entries in a convexified network")

    def constrained_layers(self) -> range:
        """1-based indices of the layers whose weights must stay non-negative."""
        if self.convex_from is None:
            return range(0)
        return range(self.convex_from + 1, len(self.layer_sizes))

    # -- normalisation -------------------------------------------------------

    def normalize_inputs(self, z):
        return (np.asarray(z, dtype=float) - self.input_min) / (self.input_max - self.input_min)

    def normalize_outputs(self, y):
        span = self.output_max - self.output_min
        y = np.asarray(y, dtype=float)
        if span == 0:
            return np.zeros_like(y)
        return (y - self.output_min) / span

    def denormalize_outputs(self, f):
        return self.output_min + (self.output_max - self.output_min) * np.asarray(f, dtype=float)

    # -- evaluation ----------------------------------------------------------

    def forward_normalized(self, H):
        """Batch forward pass in normalised units; returns (outputs, hidden activations)."""
        hidden = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            H = relu(H @ w + b)
            hidden.append(H)
        return H @ self.weights[-1] + self.biases[-1], hidden

    def predict(self, Z):
        """Raw outputs for a batch of raw inputs, shape (N,) for single-output nets."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out, _ = self.forward_normalized(self.normalize_inputs(Z))
        out = self.denormalize_outputs(out)
        return out[:, 0] if out.shape[1] == 1 else out

    def copy(self) -> "ReluNetwork":
        return ReluNetwork(
            list(self.layer_sizes),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.convex_from,
            self.input_min.copy(),
            self.input_max.copy(),
            self.output_min,
            self.output_max,
        )

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "layer_sizes": list(self.layer_sizes),
            "kind": "convexified" if self.is_convexified else "unconstrained",
            "k": self.convex_from,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_norm": [[float(lo), float(hi)] for lo, hi in zip(self.input_min, self.input_max)],
            "output_norm": [self.output_min, self.output_max],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReluNetwork":
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported network format version {d.get('version')!r}")
        kind = d["kind"]
        if kind not in ("convexified", "unconstrained"):
            raise ValueError(f"unknown network kind {kind!r}")
        k = d.get("k") if kind == "convexified" else None
        norm = np.asarray(d["input_norm"], dtype=float).reshape(-1, 2)
        return cls(
            d["layer_sizes"],
            [np.asarray(w, dtype=float).reshape(d["layer_sizes"][i], d["layer_sizes"][i + 1])
             for i, w in enumerate(d["weights"])],
            d["biases"],
            k,
            norm[:, 0],
            norm[:, 1],
            d["output_norm"][0],
            d["output_norm"][1],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "ReluNetwork":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "ReluNetwork":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def init_network(layer_sizes: Sequence[int], convex_from: int | None = None, seed: int = 0) -> ReluNetwork:
    """Fan-scaled uniform initialisation; constrained layers draw from [0, s]."""
    rng = np.random.default_rng(seed)
    sizes = [int(n) for n in layer_sizes]
    constrained = set()
    if convex_from is not None:
        constrained = set(range(convex_from + 1, len(sizes)))
    weights, biases = [], []
    for l in range(1, len(sizes)):
        s = np.sqrt(6.0 / (sizes[l - 1] + sizes[l]))
        lo = 0.0 if l in constrained else -s
        weights.append(rng.uniform(lo, s, size=(sizes[l - 1], sizes[l])))
        biases.append(np.zeros(sizes[l]))
    return ReluNetwork(sizes, weights, biases, convex_from)


def relu_forward(net: ReluNetwork, z):
    """Evaluate one raw input vector.

    Returns the raw scalar output and the hidden activations (normalised units).
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (net.layer_sizes[0],):
        raise ShapeError(f"input has shape {z.shape}, network expects ({net.layer_sizes[0]},)")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite network input")
    out, hidden = net.forward_normalized(net.normalize_inputs(z)[None, :])
    f = net.denormalize_outputs(out[0])
    return (float(f[0]) if f.shape == (1,) else f), [h[0] for h in hidden]


def fold_normalization(net: ReluNetwork) -> ReluNetwork:
    """Return an equivalent network acting on raw inputs and producing raw outputs.

    The input affine map is absorbed into layer 1 and the output scaling into
    the last layer.  Hidden pre-activations are unchanged, and the output
    scale factor is non-negative, so a convexified network stays convexified.
    """
    span_in = net.input_max - net.input_min
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    w1 = net.weights[0]
    weights[0] = w1 / span_in[:, None]
    biases[0] = net.biases[0] - (net.input_min / span_in) @ w1
    scale = net.output_max - net.output_min
    weights[-1] = weights[-1] * scale
    biases[-1] = net.output_min + scale * biases[-1]
    n0 = net.layer_sizes[0]
    return ReluNetwork(list(net.layer_sizes), weights, biases, net.convex_from,
                       np.zeros(n0), np.ones(n0), 0.0, 1.0)


def is_identity_normalized(net: ReluNetwork) -> bool:
    return (np.all(net.input_min == 0.0) and np.all(net.input_max == 1.0)
            and net.output_min == 0.0 and net.output_max == 1.0)


# -- data -------------------------------------------------------------------

FEATURES = ("x", "xtilde", "q", "r")
DEFAULT_BOUNDS = ((0.0, 10.0), (0.0, 10.0), (1.0, 8.0), (0.5, 5.0))
DEFAULT_MARGIN = 0.01


@dataclass
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.outputs = np.asarray(self.outputs, dtype=float).reshape(-1)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.outputs.shape[0]:
            raise ShapeError("inputs must be N x d with one output per row")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.outputs))):
            raise ValueError("dataset contains non-finite entries")

    @property
    def n(self) -> int:
        return self.outputs.shape[0]

    def to_csv(self) -> str:
        lines = [",".join(FEATURES + ("cost",))]
        for row, y in zip(self.inputs, self.outputs):
            lines.append(",".join(repr(float(v)) for v in row) + "," + repr(float(y)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = [ln for ln in text.splitlines() if ln.strip()]
        if not rows or rows[0].split(",") != list(FEATURES + ("cost",)):
            raise ValueError("dataset CSV must start with header x,xtilde,q,r,cost")
        data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]], dtype=float)
        if data.size == 0:
            data = np.zeros((0, 5))
        if data.shape[1] != 5:
            raise ValueError("dataset CSV rows need 5 columns")
        return cls(data[:, :4], data[:, 4])


def make_dataset(target: Callable, bounds=DEFAULT_BOUNDS, n: int = 300_000,
                 margin: float = DEFAULT_MARGIN, seed: int = 0) -> Dataset:
    """Sample (x, xtilde, q, r) uniformly in ``bounds`` with x <= (1 - margin) * xtilde.

    ``xtilde`` is redrawn until it admits a feasible x; x is then drawn
    uniformly on its feasible interval.  ``target`` is applied row-wise and
    may be vectorised over columns.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (4, 2) or np.any(bounds[:, 1] <= bounds[:, 0]):
        raise ValueError("bounds must give lo < hi for each of the four features")
    (xlo, xhi), (tlo, thi) = bounds[0], bounds[1]
    # xtilde must leave room for x >= xlo
    t_min = max(tlo, xlo / (1.0 - margin))
    if t_min >= thi:
        raise ValueError("infeasible bounds: x range lies entirely above the xtilde range")
    rng = np.random.default_rng(seed)
    Z = rng.uniform(bounds[:, 0], bounds[:, 1], size=(n, 4))
    bad = Z[:, 1] < t_min
    while np.any(bad):
        Z[bad, 1] = rng.uniform(tlo, thi, size=int(bad.sum()))
        bad = Z[:, 1] < t_min
    x_top = np.minimum(xhi, (1.0 - margin) * Z[:, 1])
    Z[:, 0] = xlo + rng.uniform(0.0, 1.0, size=n) * (x_top - xlo)
    try:
        y = np.asarray(target(Z[:, 0], Z[:, 1], Z[:, 2], Z[:, 3]), dtype=float)
        if y.shape != (n,):
            y = np.broadcast_to(y, (n,)).astype(float)
    except (TypeError, ValueError):
        y = np.array([float(target(*row)) for row in Z])
    return Dataset(Z, y)


# -- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1000
    batch_size: int = 1000
    split: float = 0.8
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("train split must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_rmse: float = float("nan")
    val_rmse: float = float("nan")
    # the same two errors in raw output units
    train_rmse_raw: float = float("nan")
    val_rmse_raw: float = float("nan")
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "train_rmse": self.train_rmse,
            "val_rmse": self.val_rmse,
            "train_rmse_raw": self.train_rmse_raw,
            "val_rmse_raw": self.val_rmse_raw,
            "wall_time": self.wall_time,
        }


def loss_and_grad(net: ReluNetwork, X, y):
    """Mean squared error and its exact gradients, in normalised units.

    Returns ``(mse, grad_w, grad_b)`` with gradients shaped like the weights
    and biases.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[1] != net.layer_sizes[0] or X.shape[0] != y.shape[0]:
        raise ShapeError(f"batch shapes {X.shape} / {y.shape} do not match the network")
    acts = [X]
    pres = []
    H = X
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        Zl = H @ w + b
        pres.append(Zl)
        H = relu(Zl)
        acts.append(H)
    out = (H @ net.weights[-1] + net.biases[-1])[:, 0]
    err = out - y
    mse = float(np.mean(err ** 2))
    g = (2.0 / y.shape[0]) * err[:, None]
    grad_w = [None] * len(net.weights)
    grad_b = [None] * len(net.biases)
    for l in range(len(net.weights) - 1, -1, -1):
        grad_w[l] = acts[l].T @ g
        grad_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ net.weights[l].T) * (pres[l - 1] > 0)
    return mse, grad_w, grad_b


def project_nonnegative(net: ReluNetwork):
    for l in net.constrained_layers():
        np.maximum(net.weights[l - 1], 0.0, out=net.weights[l - 1])


def fit(net: ReluNetwork, data: Dataset, cfg: TrainConfig | None = None, log=None) -> TrainReport:
    """Train ``net`` in place with minibatch Adam on normalised MSE.

    Normalisation parameters are taken from the full dataset.  For a
    convexified network every optimizer step is followed by clamping the
    constrained weights at zero.
    """
    cfg = cfg or TrainConfig()
    if data.inputs.shape[1] != net.layer_sizes[0] or net.layer_sizes[-1] != 1:
        raise ShapeError("network shape does not match dataset dimensionality")
    lo, hi = data.inputs.min(axis=0), data.inputs.max(axis=0)
    if data.n < 2 or np.any(hi <= lo):
        raise DegenerateDataError("every input feature needs max > min")
    start = time.perf_counter()
    net.input_min, net.input_max = lo, hi
    net.output_min, net.output_max = float(data.outputs.min()), float(data.outputs.max())
    X = net.normalize_inputs(data.inputs)
    Y = net.normalize_outputs(data.outputs)

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(data.n)
    n_train = min(max(int(round(cfg.split * data.n)), 1), data.n - 1)
    tr, va = perm[:n_train], perm[n_train:]
    Xtr, Ytr, Xva, Yva = X[tr], Y[tr], X[va], Y[va]

    project_nonnegative(net)
    params = net.weights + net.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    step = 0
    report = TrainReport()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for s in range(0, n_train, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, gw, gb = loss_and_grad(net, Xtr[idx], Ytr[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            total += loss * idx.shape[0]
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for p, g, mi, vi in zip(params, gw + gb, m, v):
                mi *= b1
                mi += (1.0 - b1) * g
                vi *= b2
                vi += (1.0 - b2) * g * g
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
            project_nonnegative(net)
        report.train_loss.append(total / n_train)
        val = float(np.mean((net.forward_normalized(Xva)[0][:, 0] - Yva) ** 2))
        report.val_loss.append(val)
        if log is not None and (epoch + 1) % max(cfg.epochs // 10, 1) == 0:
            log(f"epoch {epoch + 1}/{cfg.epochs} train {report.train_loss[-1]:.3e} val {val:.3e}")

    span = net.output_max - net.output_min
    tr_mse = float(np.mean((net.forward_normalized(Xtr)[0][:, 0] - Ytr) ** 2))
    va_mse = float(np.mean((net.forward_normalized(Xva)[0][:, 0] - Yva) ** 2))
    report.train_rmse = float(np.sqrt(tr_mse))
    report.val_rmse = float(np.sqrt(va_mse))
    report.train_rmse_raw = report.train_rmse * span
    report.val_rmse_raw = report.val_rmse * span
    report.wall_time = time.perf_counter() - start
    return report
