"""Set-function loss oracles over bit patterns, surrogate losses and
brute-force (super/sub)modularity checks.

Every optimizer in :mod:`lowbit.optim` talks to an oracle through three calls:
``evaluate(mask)``, ``marginal(i)`` and ``apply_flip(i)``.  The margin-based
oracles keep the per-row inner products ``z = base + X @ w`` cached so that
``marginal`` costs one pass over the rows instead of a full re-evaluation.
"""
from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field

import numpy as np

from .quantcore import BinaryWeightVector, QuantLevels

REFRESH_EVERY = 4096
MAX_EXHAUSTIVE_D = 13
SURROGATE_VARIANTS = ("no_relu", "tangent")


class NumericError(ValueError):
    pass


class ExhaustiveSizeError(ValueError):
    pass


# -- scalar losses -----------------------------------------------------------

def softplus(u):
    """log(1 + exp(u)), switching to the asymptotes beyond |u| > 30."""
    u = np.asarray(u, dtype=float)
    mid = np.log1p(np.exp(np.clip(u, -30.0, 30.0)))
    return np.where(u > 30.0, u, np.where(u < -30.0, np.exp(np.minimum(u, 0.0)), mid))


def sigmoid(u):
    u = np.asarray(u, dtype=float)
    e = np.exp(-np.abs(u))
    return np.where(u >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(margins, y) -> float:
    """Sum over samples of log(1 + exp(-y_i z_i))."""
    margins = np.asarray(margins, dtype=float)
    y = np.asarray(y, dtype=float)
    if margins.shape != y.shape:
        raise ValueError(f"margins {margins.shape} vs labels {y.shape}")
    if np.isnan(margins).any():
        raise NumericError("NaN margin")
    return float(np.sum(softplus(-y * margins)))


def pos_neg_split(x):
    x = np.asarray(x, dtype=float)
    pos = np.maximum(x, 0.0)
    return pos, x - pos


def _as_dense(w) -> np.ndarray:
    if isinstance(w, BinaryWeightVector):
        return w.dense()
    return np.asarray(w, dtype=float)


def zero_one_loss(w, task, per_sample: bool = False):
    z = task.features @ _as_dense(w)
    errs = (task.y * z <= 0).astype(int)
    return errs if per_sample else int(errs.sum())


def posneg_surrogate_loss(w, task, per_sample: bool = False):
    """Average of the base-2 logistic losses on the positive and negative parts
    of the inputs.  log2(1 + exp(-u)) >= [u <= 0], so this bounds the 0-1 loss
    sample by sample, and it is supermodular in w."""
    w = _as_dense(w)
    pos, neg = pos_neg_split(task.features)
    terms = 0.5 * (softplus(-task.y * (pos @ w)) + softplus(-task.y * (neg @ w))) / np.log(2.0)
    return terms if per_sample else float(terms.sum())


def ternary_loss(w1, w2, task) -> float:
    return logistic_loss(task.features @ (_as_dense(w1) - _as_dense(w2)), task.y)


def ternary_surrogate_loss(w1, w2, task) -> float:
    x2 = 2.0 * task.features
    return 0.5 * (logistic_loss(x2 @ _as_dense(w1), task.y)
                  + logistic_loss(-x2 @ _as_dense(w2), task.y))


def multibit_surrogate_loss(m, task) -> float:
    """Jensen bound (1/B) sum_j loss(B * coef_j * <b_j, x>) for a
    :class:`~lowbit.quantcore.MultiComponentWeight`; equals the ternary
    surrogate for B = 2, unit scale."""
    B = len(m.components)
    total = 0.0
    for sign, comp in zip(m.signs, m.components):
        total += logistic_loss(B * m.scale * sign * (task.features @ comp.dense()), task.y)
    return total / B


# -- single-neuron subproblem ------------------------------------------------

@dataclass(frozen=True)
class NeuronSubproblem:
    """Per-sample loss g(t) = log(1 + exp(p * relu(t) + c)) of one hidden unit,
    where p = -y a_k and c collects everything the unit does not control."""
    p: float
    c: float

    @classmethod
    def from_network(cls, y: float, a_k: float, rest: float) -> "NeuronSubproblem":
        return cls(-y * a_k, -y * rest)


def neuron_loss(sub, t):
    p, c = (sub.p, sub.c) if isinstance(sub, NeuronSubproblem) else sub
    return softplus(np.multiply(p, np.maximum(t, 0.0)) + c)


def neuron_surrogate(sub, t, variant: str = "no_relu"):
    """Convex upper bound of :func:`neuron_loss`.

    For p >= 0 the loss is already convex and is returned unchanged.  For
    p < 0 the flat part t < 0 is replaced by the tangent at 0 (``tangent``)
    or by dropping the ReLU (``no_relu``).
    """
    p, c = (sub.p, sub.c) if isinstance(sub, NeuronSubproblem) else sub
    p = np.asarray(p, dtype=float)
    c = np.asarray(c, dtype=float)
    t = np.asarray(t, dtype=float)
    exact = softplus(p * np.maximum(t, 0.0) + c)
    if variant == "no_relu":
        bound = softplus(p * t + c)
    elif variant == "tangent":
        bound = softplus(c) + p * sigmoid(c) * np.minimum(t, 0.0) \
            + (exact - softplus(c)) * (t >= 0)
    else:
        raise ValueError(f"unknown surrogate variant {variant!r}")
    return np.where(p >= 0, exact, bound)


# -- column sources ----------------------------------------------------------

class DenseColumns:
    """Column access to an (n, d) matrix; rows are the margin rows."""

    def __init__(self, X):
        X = np.asarray(X, dtype=float)
        self.X = X
        self._T = np.ascontiguousarray(X.T)
        self.n_rows, self.d = X.shape

    def __getitem__(self, j):
        return self._T[j]

    def matvec(self, v):
        return self.X @ v


class PatchColumns:
    """Columns of the im2col patch matrix of a batch of (C, H, W) images, built
    lazily: column (c, di, dj) is a shifted window of channel c.

    Rows are ordered sample-major, then row-major over output positions.
    """

    def __init__(self, images, kernel: int):
        images = np.asarray(images, dtype=float)
        n, C, H, W = images.shape
        if kernel > H or kernel > W:
            raise ValueError(f"kernel {kernel} larger than input {H}x{W}")
        self.images = images
        self.k = kernel
        self.out_hw = (H - kernel + 1, W - kernel + 1)
        self.positions = self.out_hw[0] * self.out_hw[1]
        self.n_rows = n * self.positions
        self.d = C * kernel * kernel

    def __getitem__(self, j):
        kk = self.k * self.k
        c, r = divmod(j, kk)
        di, dj = divmod(r, self.k)
        ho, wo = self.out_hw
        return self.images[:, c, di:di + ho, dj:dj + wo].reshape(-1)

    def matvec(self, v):
        out = np.zeros(self.n_rows)
        for j in np.flatnonzero(v):
            out += v[j] * self[j]
        return out


_columns_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def task_columns(task) -> DenseColumns:
    """Shared column view of a task's features (cached per task object)."""
    cols = _columns_cache.get(task)
    if cols is None:
        cols = DenseColumns(task.features)
        _columns_cache[task] = cols
    return cols


# -- oracles -----------------------------------------------------------------

class SetFunctionOracle:
    """Set function over subsets of range(d), encoded as boolean masks.

    Subclasses implement ``_eval_mask``; this base recomputes from scratch on
    every call and is meant for small, explicit functions.
    """

    def __init__(self, d: int, mask=None, value: float | None = None):
        self.d = int(d)
        self.mask = np.zeros(self.d, dtype=bool) if mask is None else np.array(mask, dtype=bool)
        if self.mask.shape != (self.d,):
            raise ValueError(f"mask shape {self.mask.shape} does not match d={self.d}")
        self.n_marginals = 0
        self.n_flips = 0
        self.value = self._eval_mask(self.mask) if value is None else value

    def _eval_mask(self, mask) -> float:
        raise NotImplementedError

    def evaluate(self, mask=None) -> float:
        if mask is None:
            return self.value
        if isinstance(mask, BinaryWeightVector):
            mask = mask.mask
        return self._eval_mask(np.asarray(mask, dtype=bool))

    def marginal(self, i: int) -> float:
        self.n_marginals += 1
        trial = self.mask.copy()
        trial[i] = not trial[i]
        return self._eval_mask(trial) - self.value

    def apply_flip(self, i: int) -> None:
        self.mask[i] = not self.mask[i]
        self.value = self._eval_mask(self.mask)
        self.n_flips += 1


class FunctionOracle(SetFunctionOracle):
    def __init__(self, fn, d: int, mask=None):
        self.fn = fn
        super().__init__(d, mask)

    def _eval_mask(self, mask):
        return float(self.fn(mask))


class TableOracle(SetFunctionOracle):
    """Set function given as a table indexed by the mask's integer encoding
    (bit i of the index = element i)."""

    def __init__(self, table, mask=None):
        self.table = np.asarray(table, dtype=float)
        d = int(np.log2(self.table.size))
        if 1 << d != self.table.size:
            raise ValueError("table size must be a power of two")
        self._weights = 1 << np.arange(d)
        super().__init__(d, mask)
        self._index = int(self.mask @ self._weights)

    def _eval_mask(self, mask):
        return float(self.table[int(mask @ self._weights)])

    def marginal(self, i):
        self.n_marginals += 1
        return float(self.table[self._index ^ (1 << i)] - self.table[self._index])

    def apply_flip(self, i):
        self.mask[i] = not self.mask[i]
        self._index ^= 1 << i
        self.value = float(self.table[self._index])
        self.n_flips += 1


class MarginOracle(SetFunctionOracle):
    """Oracle whose value depends on the bits only through per-row margins

        z = base + cols @ (low + step * mask)

    A flip of coordinate i moves every margin by +-step * cols[i]; the last
    trial from :meth:`marginal` is kept so that an immediate
    :meth:`apply_flip` of the same coordinate costs nothing extra.  Margins are
    recomputed from scratch every ``refresh_every`` committed flips.
    """

    def __init__(self, cols, mask=None, low: float = 0.0, step: float = 1.0,
                 base=None, refresh_every: int = REFRESH_EVERY):
        self.cols = cols
        self.low = float(low)
        self.step = float(step)
        self.base = np.zeros(cols.n_rows) if base is None else np.asarray(base, dtype=float)
        if self.base.shape != (cols.n_rows,):
            raise ValueError("base margins do not match the number of rows")
        self.refresh_every = refresh_every
        self._trial = None
        self._since_refresh = 0
        self.max_drift = 0.0
        self._fault_sign = 1.0
        mask = np.zeros(cols.d, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        self.margins = self._margins_for(mask)
        super().__init__(cols.d, mask, self._objective(self.margins))

    def _objective(self, z) -> float:
        raise NotImplementedError

    def _margins_for(self, mask):
        return self.base + self.cols.matvec(self.low + self.step * mask)

    def _eval_mask(self, mask):
        return self._objective(self._margins_for(mask))

    def _shift(self, i):
        delta = -self.step if self.mask[i] else self.step
        return self.margins + (self._fault_sign * delta) * self.cols[i]

    def marginal(self, i: int) -> float:
        if not 0 <= i < self.d:
            raise IndexError(f"coordinate {i} out of range for d={self.d}")
        self.n_marginals += 1
        z = self._shift(i)
        v = self._objective(z)
        self._trial = (i, z, v)
        return v - self.value

    def apply_flip(self, i: int) -> None:
        if self._trial is not None and self._trial[0] == i:
            _, z, v = self._trial
        else:
            z = self._shift(i)
            v = self._objective(z)
        self._trial = None
        self.mask[i] = not self.mask[i]
        self.margins = z
        self.value = v
        self.n_flips += 1
        self._since_refresh += 1
        if self._since_refresh >= self.refresh_every:
            self.refresh()

    def drift(self) -> float:
        """Largest gap between cached and freshly computed margins."""
        return float(np.max(np.abs(self.margins - self._margins_for(self.mask)), initial=0.0))

    def refresh(self) -> float:
        exact = self._margins_for(self.mask)
        gap = float(np.max(np.abs(self.margins - exact), initial=0.0))
        self.max_drift = max(self.max_drift, gap)
        self.margins = exact
        self.value = self._objective(exact)
        self._since_refresh = 0
        self._trial = None
        return gap

    def weights(self, levels: QuantLevels | None = None) -> BinaryWeightVector:
        if levels is None:
            levels = QuantLevels(self.low, self.low + self.step)
        return BinaryWeightVector.from_mask(self.mask, levels)


class LinearOracle(MarginOracle):
    """Logistic loss of a linear model, sum_i log(1 + exp(-y_i z_i))."""

    def __init__(self, cols, y, mask=None, low=0.0, step=1.0, base=None, scale: float = 1.0, **kw):
        self.y = np.asarray(y, dtype=float)
        self.margin_scale = float(scale)
        super().__init__(cols, mask, low, step, base, **kw)

    def _objective(self, z):
        return logistic_loss(self.margin_scale * z, self.y)


def make_linear_oracle(task, w: BinaryWeightVector, cols=None) -> LinearOracle:
    cols = task_columns(task) if cols is None else cols
    if w.d != cols.d:
        raise ValueError(f"weight d={w.d} but task d={cols.d}")
    return LinearOracle(cols, task.y, w.mask, w.levels.alpha, w.levels.step)


class NeuronOracle(MarginOracle):
    """Loss of one hidden unit (one filter for convolutions) with everything
    else held fixed, as a function of its weight bits.

    Rows are responses: ``positions`` consecutive rows per sample.  With
    per-response coefficients ``ahat`` and per-sample offsets ``rest`` the
    model output is ``rest_i + sum_r ahat_r * relu(z_r)``.

    ``variant="exact"`` sums the logistic loss of that output.  The surrogate
    variants replace it by the Jensen bound over positions,
    (1/P) sum_r gtilde_r(z_r) with p_r = -y_i P ahat_r and c_i = -y_i rest_i,
    which is exact for dense layers (P = 1) up to the convex surrogate.
    """

    def __init__(self, cols, y, ahat, rest, variant="no_relu", mask=None, low=0.0, step=1.0,
                 base=None, **kw):
        if variant not in SURROGATE_VARIANTS + ("exact",):
            raise ValueError(f"unknown variant {variant!r}")
        self.y = np.asarray(y, dtype=float)
        self.n_samples = self.y.size
        self.positions = cols.n_rows // self.n_samples
        if self.positions * self.n_samples != cols.n_rows:
            raise ValueError("rows are not a whole number of positions per sample")
        self.ahat = np.asarray(ahat, dtype=float).reshape(-1)
        self.rest = np.asarray(rest, dtype=float).reshape(-1)
        self.variant = variant
        P = self.positions
        yr = np.repeat(self.y, P)
        self.p = -yr * P * self.ahat
        self.c = np.repeat(-self.y * self.rest, P)
        super().__init__(cols, mask, low, step, base, **kw)

    def outputs(self, z=None):
        z = self.margins if z is None else z
        contrib = self.ahat * np.maximum(z, 0.0)
        return self.rest + contrib.reshape(self.n_samples, self.positions).sum(axis=1)

    def _objective(self, z):
        if np.isnan(z).any():
            raise NumericError("NaN margin")
        if self.variant == "exact":
            return float(np.sum(softplus(-self.y * self.outputs(z))))
        g = neuron_surrogate((self.p, self.c), z, self.variant)
        return float(np.sum(g)) / self.positions


def neuron_oracle(model, k: int, task, variant: str = "no_relu", layer: int = 0) -> NeuronOracle:
    """Oracle for row ``k`` of quantized layer ``layer`` of ``model``, with the
    layers above replaced by their linearization around the current weights."""
    from .netmodel import layer_linearization

    lin = layer_linearization(model, task.features, layer)
    if not 0 <= k < lin.units:
        raise IndexError(f"neuron {k} out of range for {lin.units} units")
    return lin.oracle(k, task.y, variant=variant)


# -- brute force -------------------------------------------------------------

def _mask_table(d: int) -> np.ndarray:
    idx = np.arange(1 << d)
    return ((idx[:, None] >> np.arange(d)) & 1).astype(bool)


def enumerate_values(f, d: int) -> np.ndarray:
    """Values of ``f`` on all 2^d masks, indexed by integer encoding."""
    if d > MAX_EXHAUSTIVE_D:
        raise ExhaustiveSizeError(f"d={d} exceeds exhaustive limit {MAX_EXHAUSTIVE_D}")
    if isinstance(f, SetFunctionOracle):
        f = f.evaluate
    return np.array([f(m) for m in _mask_table(d)], dtype=float)


def brute_force_min(f, d: int) -> tuple[float, np.ndarray]:
    table = enumerate_values(f, d)
    best = int(np.argmin(table))
    return float(table[best]), _mask_table(d)[best]


@dataclass
class ModularityReport:
    direction: str
    d: int
    n_checked: int
    n_violations: int
    max_violation: float
    tol: float
    examples: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def to_dict(self) -> dict:
        return {
            "direction": self.direction, "d": self.d, "n_checked": self.n_checked,
            "n_violations": self.n_violations, "max_violation": self.max_violation,
            "tol": self.tol, "examples": self.examples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _nested_pairs(m: int):
    """All (A, B) with B subset of A over m elements, as integer masks."""
    A = np.zeros(1, dtype=np.int64)
    B = np.zeros(1, dtype=np.int64)
    for e in range(m):
        bit = 1 << e
        A = np.concatenate([A, A | bit, A | bit])
        B = np.concatenate([B, B, B | bit])
    return A, B


def _insert_zero_bit(m, pos):
    low = m & ((1 << pos) - 1)
    return ((m >> pos) << (pos + 1)) | low


def check_supermodular(f, d: int, tol: float = 1e-9, direction: str = "super",
                       max_examples: int = 10) -> ModularityReport:
    """Exhaustively test every B subset A, x not in A against

        f(B + x) - f(B) <= f(A + x) - f(A)   (supermodular), or
        f(B + x) - f(B) >= f(A + x) - f(A)   (submodular).

    ``f`` is an oracle, a callable on boolean masks, or a precomputed table.
    """
    if direction not in ("super", "sub"):
        raise ValueError("direction must be 'super' or 'sub'")
    if d > MAX_EXHAUSTIVE_D:
        raise ExhaustiveSizeError(f"d={d} exceeds exhaustive limit {MAX_EXHAUSTIVE_D}")
    if isinstance(f, np.ndarray):
        table = np.asarray(f, dtype=float)
    else:
        table = enumerate_values(f, d)
    sign = 1.0 if direction == "super" else -1.0
    A_small, B_small = _nested_pairs(d - 1)
    n_checked = 0
    n_viol = 0
    worst = 0.0
    examples = []
    for x in range(d):
        A = _insert_zero_bit(A_small, x)
        B = _insert_zero_bit(B_small, x)
        gain_B = table[B | (1 << x)] - table[B]
        gain_A = table[A | (1 << x)] - table[A]
        excess = sign * (gain_B - gain_A)
        bad = excess > tol
        n_checked += excess.size
        if bad.any():
            n_viol += int(bad.sum())
            worst = max(worst, float(excess.max()))
            for k in np.flatnonzero(bad)[: max(0, max_examples - len(examples))]:
                examples.append({
                    "x": int(x),
                    "A": [int(e) for e in range(d) if A[k] >> e & 1],
                    "B": [int(e) for e in range(d) if B[k] >> e & 1],
                    "excess": float(excess[k]),
                })
    return ModularityReport(direction, d, n_checked, n_viol, worst, tol, examples)


def check_submodular(f, d: int, tol: float = 1e-9, **kw) -> ModularityReport:
    return check_supermodular(f, d, tol, direction="sub", **kw)
