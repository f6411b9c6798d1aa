"""Combinatorial optimizers over bit patterns and the layerwise training loops.

``gcd`` and ``rsm`` work on any :class:`~lowbit.oracle.SetFunctionOracle`.
``multibit_cd`` cycles over the bit planes of a multi-component weight, and
``two_layer_train`` / ``multilayer_train`` cycle over hidden units, with the
layers above the one being trained replaced by their linearization.  The
real-valued output layer is fitted by stochastic average gradient (``sag``).
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import netmodel
from .oracle import (LinearOracle, SURROGATE_VARIANTS, logistic_loss, sigmoid, softplus,
                     task_columns)
from .quantcore import BinaryWeightVector, MultiComponentWeight, QuantLevels, new_binary

log = logging.getLogger(__name__)

METHODS = ("gcd", "rsm")


class ConfigError(ValueError):
    pass


class MonotonicityError(AssertionError):
    pass


@dataclass
class OptimizerConfig:
    n_iter: int = 1
    seed: int = 0
    order: str = "ascending"             # or "permutation"
    temperature: float = 0.05
    method: str = "gcd"                  # gcd | rsm | hybrid
    layer_methods: list | None = None    # overrides `method` per quantized layer
    surrogate: str = "no_relu"
    accept_reject: bool = True
    multibit_objective: str = "exact"    # exact | surrogate (RSM on bit planes)
    sag_epochs: int = 20
    sag_lambda: float = 1e-4
    sag_step: float | None = None
    output_epochs: int = 5
    check_monotone: bool = True

    def __post_init__(self):
        if self.n_iter < 1:
            raise ConfigError("n_iter must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.order not in ("ascending", "permutation"):
            raise ConfigError(f"unknown coordinate order {self.order!r}")
        if self.method not in METHODS + ("hybrid",):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.surrogate not in SURROGATE_VARIANTS:
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")
        if self.multibit_objective not in ("exact", "surrogate"):
            raise ConfigError(f"unknown multibit objective {self.multibit_objective!r}")
        if self.layer_methods is not None and any(m not in METHODS for m in self.layer_methods):
            raise ConfigError(f"layer methods must be in {METHODS}")

    def to_dict(self) -> dict:
        return asdict(self)


def coordinate_order(d: int, order: str = "ascending", rng=None) -> np.ndarray:
    if order == "ascending":
        return np.arange(d)
    if order == "permutation":
        if rng is None:
            raise ConfigError("a permutation order needs an rng")
        return rng.permutation(d)
    raise ConfigError(f"unknown coordinate order {order!r}")


# -- single bit-pattern optimizers -------------------------------------------------

def gcd(oracle, order=None, history: list | None = None, check: bool = True) -> np.ndarray:
    """One greedy coordinate pass: flip each coordinate in turn and keep the
    flip unless it strictly increases the loss.  Returns the final mask; the
    oracle is left at that mask."""
    order = np.arange(oracle.d) if order is None else order
    prev = oracle.value
    if history is not None:
        history.append(prev)
    for i in order:
        if oracle.marginal(int(i)) <= 0.0:
            oracle.apply_flip(int(i))
            if check and oracle.value > prev + 1e-9 * max(1.0, abs(prev)):
                raise MonotonicityError(f"loss rose from {prev} to {oracle.value} at {i}")
            prev = oracle.value
            if history is not None:
                history.append(prev)
    return oracle.mask.copy()


def rsm(make_oracle, d: int, rng, order=None, return_oracle: bool = False, trace: list | None = None):
    """Randomized double greedy for supermodular minimization.

    ``make_oracle(mask)`` must return a fresh oracle positioned at ``mask``.
    The lower frontier starts with every bit clear, the upper with every bit
    set; at coordinate i the lower frontier sets the bit with probability
    a'/(a'+b') (otherwise the upper frontier clears it), where a and b are the
    loss decreases of the two moves clipped at 0.  When both are 0 the lower
    frontier's move is taken.
    """
    lower = make_oracle(np.zeros(d, dtype=bool))
    upper = make_oracle(np.ones(d, dtype=bool))
    order = np.arange(d) if order is None else order
    for i in order:
        i = int(i)
        a = -lower.marginal(i)
        b = -upper.marginal(i)
        a_pos, b_pos = max(0.0, a), max(0.0, b)
        total = a_pos + b_pos
        take_lower = total == 0.0 or rng.random() < a_pos / total
        if take_lower:
            lower.apply_flip(i)
        else:
            upper.apply_flip(i)
        if trace is not None:
            trace.append((i, a, b, take_lower))
    if not np.array_equal(lower.mask, upper.mask):
        raise AssertionError("frontiers did not meet")
    if return_oracle:
        return lower.mask.copy(), lower
    return lower.mask.copy()


def train_single_binary(task, levels: QuantLevels, method: str = "rsm",
                        cfg: OptimizerConfig | None = None, history: list | None = None,
                        init: BinaryWeightVector | None = None) -> BinaryWeightVector:
    """Single-layer binary classifier ``sign(<w, x>)`` with w in {alpha, beta}^d."""
    cfg = cfg or OptimizerConfig()
    rng = np.random.default_rng(cfg.seed)
    cols = task_columns(task)
    d = cols.d

    def make(mask):
        return LinearOracle(cols, task.y, mask, levels.alpha, levels.step)

    if method == "rsm":
        mask = rsm(make, d, rng, coordinate_order(d, cfg.order, rng))
        if history is not None:
            history.append(make(mask).value)
        return BinaryWeightVector.from_mask(mask, levels)
    if method != "gcd":
        raise ConfigError(f"unknown method {method!r}")
    w0 = init if init is not None else new_binary(d, levels, "random", cfg.seed)
    oracle = make(w0.mask)
    for _ in range(cfg.n_iter):
        gcd(oracle, coordinate_order(d, cfg.order, rng), history, cfg.check_monotone)
    return BinaryWeightVector.from_mask(oracle.mask, levels)


def multibit_cd(task, m: MultiComponentWeight, cfg: OptimizerConfig | None = None,
                method: str = "rsm", history: list | None = None) -> MultiComponentWeight:
    """Block coordinate descent over the bit planes of ``m``.

    Each plane is optimized with the others fixed.  On non-negative inputs
    the logistic loss of the resulting margin is supermodular in that plane,
    so RSM may run on it directly (``multibit_objective="exact"``) or on the
    decoupled Jensen bound (``"surrogate"``).  GCD always uses the exact loss.
    """
    cfg = cfg or OptimizerConfig()
    rng = np.random.default_rng(cfg.seed)
    cols = task_columns(task)
    B = len(m.components)
    masks = [c.mask.copy() for c in m.components]
    coefs = [m.scale * s for s in m.signs]
    plane_margin = [cols.matvec(mk * 1.0) for mk in masks]

    for _ in range(cfg.n_iter):
        for j in range(B):
            base = sum((coefs[q] * plane_margin[q] for q in range(B) if q != j),
                       np.zeros(cols.n_rows))
            order = coordinate_order(cols.d, cfg.order, rng)
            if method == "gcd":
                oracle = LinearOracle(cols, task.y, masks[j], 0.0, coefs[j], base)
                masks[j] = gcd(oracle, order, None, cfg.check_monotone)
            elif method == "rsm":
                if cfg.multibit_objective == "surrogate":
                    def make(mask, j=j):
                        return LinearOracle(cols, task.y, mask, 0.0, coefs[j], None, scale=B)
                else:
                    def make(mask, j=j, base=base):
                        return LinearOracle(cols, task.y, mask, 0.0, coefs[j], base)
                masks[j] = rsm(make, cols.d, rng, order)
            else:
                raise ConfigError(f"unknown method {method!r}")
            plane_margin[j] = cols.matvec(masks[j] * 1.0)
            if history is not None:
                z = sum(coefs[q] * plane_margin[q] for q in range(B))
                history.append(logistic_loss(z, task.y))
    comps = tuple(BinaryWeightVector.from_mask(mk, m.components[0].levels) for mk in masks)
    return MultiComponentWeight(comps, m.signs, m.scale)


# -- full-precision baseline ----------------------------------------------------------

def sag(features, y, epochs: int = 20, lam: float = 1e-4, step: float | None = None,
        seed: int = 0, w0=None) -> np.ndarray:
    """Stochastic average gradient for L2-regularized logistic regression

        (1/n) sum_i log(1 + exp(-y_i <w, x_i>)) + (lam / 2) ||w||^2.

    Per-sample gradients are stored as scalars (the gradient of sample i is
    a multiple of x_i).  Default step 1 / (0.25 max_i ||x_i||^2 + lam).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    n, d = X.shape
    w = np.zeros(d) if w0 is None else np.array(w0, dtype=float)
    if step is None:
        step = 1.0 / (0.25 * float(np.max(np.einsum("ij,ij->i", X, X), initial=0.0)) + lam)
    rng = np.random.default_rng(seed)
    scalars = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    n_seen = 0
    grad_sum = np.zeros(d)
    for _ in range(epochs):
        for i in rng.integers(0, n, size=n):
            xi = X[i]
            m = y[i] * (xi @ w)
            if m >= 0:
                e = math.exp(-m)
                s = -y[i] * e / (1.0 + e)
            else:
                s = -y[i] / (1.0 + math.exp(m))
            if not seen[i]:
                seen[i] = True
                n_seen += 1
            grad_sum += (s - scalars[i]) * xi
            scalars[i] = s
            w *= 1.0 - step * lam
            w -= (step / n_seen) * grad_sum
    return w


# -- reports ----------------------------------------------------------------------------

@dataclass
class TrainReport:
    seed: int
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("sweep", "train_loss", "test_loss", "test_acc", "seconds")

    def add(self, sweep, train_loss, test_loss=None, test_acc=None, seconds=0.0, **extra):
        row = {"sweep": sweep, "train_loss": train_loss, "test_loss": test_loss,
               "test_acc": test_acc, "seconds": seconds}
        row.update(extra)
        self.rows.append(row)

    @property
    def train_losses(self) -> list:
        return [r["train_loss"] for r in self.rows]

    def to_dict(self, timing: bool = True) -> dict:
        rows = self.rows if timing else [{k: v for k, v in r.items() if k != "seconds"}
                                         for r in self.rows]
        return {"seed": self.seed, "rows": rows, "meta": self.meta}

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def append_csv(self, path) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=self.CSV_COLUMNS, extrasaction="ignore")
            if new:
                writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def evaluate_outputs(outputs, y) -> tuple[float, float]:
    """Mean logistic loss and accuracy (f > 0 predicts +1)."""
    outputs = np.asarray(outputs, dtype=float)
    y = np.asarray(y, dtype=float)
    loss = float(np.mean(softplus(-y * outputs)))
    acc = float(np.mean(np.where(outputs > 0, 1.0, -1.0) == y))
    return loss, acc


def evaluate_model(model, task) -> tuple[float, float]:
    return evaluate_outputs(netmodel.predict(model, task.features), task.y)


# -- layerwise training ------------------------------------------------------------------

def layer_methods(n_layers: int, cfg: OptimizerConfig) -> list:
    """Per quantized layer method; ``hybrid`` uses GCD on the first
    ceil(n/2) layers and RSM on the rest."""
    if cfg.layer_methods is not None:
        if len(cfg.layer_methods) != n_layers:
            raise ConfigError(f"need {n_layers} layer methods, got {len(cfg.layer_methods)}")
        return list(cfg.layer_methods)
    if cfg.method == "hybrid":
        n_gcd = -(-n_layers // 2)
        return ["gcd"] * n_gcd + ["rsm"] * (n_layers - n_gcd)
    return [cfg.method] * n_layers


@dataclass
class LayerStats:
    accepted: int = 0
    reverted: int = 0
    increases: int = 0
    marginals: int = 0


def train_layer(model, l: int, task, method: str, cfg: OptimizerConfig, rng,
                stats: LayerStats | None = None) -> LayerStats:
    """One pass of per-unit updates on quantized layer ``l`` (in place).

    The layers above are linearized once, at the start of the pass; after each
    unit changes, the other units' constants are refreshed from the running
    linearized output.  Updates that raise the pass objective (surrogate for
    RSM, exact linearized loss for GCD) by diff > 0 are reverted with
    probability 1 - sigmoid(diff / temperature).
    """
    stats = stats or LayerStats()
    lin = netmodel.layer_linearization(model, task.features, l)
    weights = model.layers[l].weights
    d = weights.shape[1]
    for k in range(weights.shape[0]):
        for j in range(weights.n_components):
            old = weights.bits[j, k].copy()
            order = coordinate_order(d, cfg.order, rng)
            if method == "gcd":
                oracle = lin.oracle(k, task.y, "exact", j)
                before = oracle.value
                gcd(oracle, order, None, cfg.check_monotone)
            elif method == "rsm":
                def make(mask, k=k, j=j):
                    return lin.oracle(k, task.y, cfg.surrogate, j, mask=mask)
                _, oracle = rsm(make, d, rng, order, return_oracle=True)
                before = oracle.evaluate(old)
            else:
                raise ConfigError(f"unknown method {method!r}")
            stats.marginals += oracle.n_marginals
            diff = oracle.value - before
            if diff > 0:
                stats.increases += 1
                if cfg.accept_reject and rng.random() < 1.0 - float(sigmoid(diff / cfg.temperature)):
                    stats.reverted += 1
                    continue
            stats.accepted += 1
            weights.bits[j, k] = oracle.mask
            lin.commit(k, oracle.margins)
    return stats


def fit_output_layer(model, task, cfg: OptimizerConfig, rng) -> None:
    """Refit the real-valued output weights on the current last-layer features."""
    cache = netmodel.forward_batch(model, task.features)
    last = model.layers[-1]
    feats = netmodel._post_to_out(last, netmodel.relu(cache.pre[-1])).reshape(task.n, -1)
    model.a = sag(feats, task.y, cfg.output_epochs, cfg.sag_lambda, cfg.sag_step,
                  int(rng.integers(2 ** 31)), w0=model.a)


def multilayer_train(model, task, cfg: OptimizerConfig | None = None, test=None,
                     report: TrainReport | None = None, on_sweep=None):
    """Layerwise training: each sweep visits quantized layers bottom-up, runs
    the per-unit pass on it and refits the output layer.  Returns
    ``(model, report)``; ``model`` is modified in place.  ``on_sweep(s, model,
    report)`` runs after each sweep; a true return value stops training."""
    cfg = cfg or OptimizerConfig()
    rng = np.random.default_rng(cfg.seed)
    methods = layer_methods(len(model.layers), cfg)
    report = report or TrainReport(cfg.seed)
    report.meta.setdefault("layer_methods", methods)
    for s in range(1, cfg.n_iter + 1):
        t0 = time.perf_counter()
        per_layer = []
        for l, method in enumerate(methods):
            stats = train_layer(model, l, task, method, cfg, rng)
            fit_output_layer(model, task, cfg, rng)
            per_layer.append(asdict(stats))
        seconds = time.perf_counter() - t0
        train_loss, train_acc = evaluate_model(model, task)
        test_loss = test_acc = None
        if test is not None:
            test_loss, test_acc = evaluate_model(model, test)
        report.add(s, train_loss, test_loss, test_acc, seconds, train_acc=train_acc,
                   layers=per_layer)
        log.info("sweep %d: train %.4f test_acc %s (%.1fs)", s, train_loss, test_acc, seconds)
        if on_sweep is not None and on_sweep(s, model, report):
            break
    return model, report


def two_layer_train(model, task, cfg: OptimizerConfig | None = None, test=None, **kw):
    """Alternate per-unit updates of the single hidden layer with SAG refits of
    the output weights."""
    if len(model.layers) != 1:
        raise ConfigError("two_layer_train needs exactly one quantized layer")
    if model.layers[0].units == 0:
        raise ConfigError("hidden layer has no units")
    return multilayer_train(model, task, cfg, test, **kw)
