"""Self-contained numerical checks of the structural claims the optimizers rely
on: supermodularity of the oracles, the upper bounds, the double-greedy
approximation ratio, margin-cache consistency, the linearization and GCD
monotonicity.  Each check builds its own small random instances.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import netmodel
from .dataio import BinaryTask
from .oracle import (DenseColumns, LinearOracle, NeuronOracle, check_supermodular,
                     enumerate_values, neuron_loss, neuron_surrogate,
                     posneg_surrogate_loss, ternary_loss, ternary_surrogate_loss,
                     zero_one_loss)
from .optim import gcd, rsm

TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        extra = ", ".join(f"{k}={v}" for k, v in self.detail.items())
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {extra}"


def random_task(rng, n: int, d: int, low: float = 0.0, high: float = 1.0) -> BinaryTask:
    X = rng.uniform(low, high, size=(n, d))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    y[0], y[-1] = 1.0, -1.0
    return BinaryTask(X, y)


def random_levels(rng) -> tuple[float, float]:
    alpha = rng.uniform(-1.0, 0.5)
    return alpha, alpha + rng.uniform(0.1, 1.5)


def linear_oracle(task, alpha=0.0, beta=1.0, mask=None, **kw) -> LinearOracle:
    return LinearOracle(DenseColumns(task.features), task.y, mask, alpha, beta - alpha, **kw)


def check_linear_supermodular(n_instances: int = 100, d: int = 6, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    viol = 0
    worst = 0.0
    for _ in range(n_instances):
        task = random_task(rng, int(rng.integers(1, 8)), d)
        rep = check_supermodular(linear_oracle(task, *random_levels(rng)), d, TOL)
        viol += rep.n_violations
        worst = max(worst, rep.max_violation)
    return CheckResult("linear logistic oracle supermodular on x >= 0", viol == 0,
                       {"instances": n_instances, "d": d, "violations": viol, "max_excess": worst})


def neuron_instance(rng, n: int, d: int, positions: int, variant: str) -> NeuronOracle:
    X = rng.uniform(0.0, 1.0, size=(n * positions, d))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    ahat = rng.normal(size=n * positions)
    rest = rng.normal(size=n)
    alpha, beta = random_levels(rng)
    return NeuronOracle(DenseColumns(X), y, ahat, rest, variant, low=alpha, step=beta - alpha,
                        base=rng.normal(size=n * positions))


def check_neuron_supermodular(n_instances: int = 50, d: int = 6, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    viol = {"no_relu": 0, "tangent": 0}
    for variant in viol:
        for _ in range(n_instances):
            P = int(rng.integers(1, 4))
            orc = neuron_instance(rng, int(rng.integers(1, 6)), d, P, variant)
            viol[variant] += check_supermodular(orc, d, TOL).n_violations
    return CheckResult("neuron surrogates supermodular (both variants)",
                       sum(viol.values()) == 0, {"instances": n_instances, "d": d, **viol})


def check_mixed_sign_violation() -> CheckResult:
    """Inputs (1, -1): f({0}) + f({1}) = g(1) + g(-1) > 2 g(0) = f({}) + f({0, 1})
    by strict convexity, so the supermodular inequality fails."""
    task = BinaryTask(np.array([[1.0, -1.0, 0.5]]), np.array([1.0]))
    rep = check_supermodular(linear_oracle(task), 3, TOL)
    return CheckResult("mixed-sign inputs violate supermodularity", rep.n_violations > 0,
                       {"violations": rep.n_violations, "max_excess": rep.max_violation})


def check_surrogate_bounds(seed: int = 2, n_pairs: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = {"posneg": -np.inf, "ternary": -np.inf, "neuron": -np.inf}
    for _ in range(20):
        d = int(rng.integers(2, 6))
        task = random_task(rng, 8, d, -1.0, 1.0)
        for bits in itertools.product((0, 1), repeat=d):
            w = 0.5 * (2 * np.array(bits) - 1.0)
            gap = zero_one_loss(w, task, True) - posneg_surrogate_loss(w, task, True)
            worst["posneg"] = max(worst["posneg"], float(gap.max()))
        pos_task = random_task(rng, 8, d)
        for b1 in itertools.product((0, 1), repeat=d):
            for b2 in itertools.product((0, 1), repeat=d):
                gap = ternary_loss(np.array(b1), np.array(b2), pos_task) \
                    - ternary_surrogate_loss(np.array(b1), np.array(b2), pos_task)
                worst["ternary"] = max(worst["ternary"], gap)
    t = np.linspace(-10.0, 10.0, 1000)
    for _ in range(n_pairs):
        sub = (-rng.uniform(0.01, 5.0), rng.normal(scale=3.0))
        exact = neuron_loss(sub, t)
        for variant in ("no_relu", "tangent"):
            worst["neuron"] = max(worst["neuron"], float(np.max(exact - neuron_surrogate(sub, t, variant))))
    ok = all(v <= TOL for v in worst.values())
    return CheckResult("surrogates upper-bound their targets", ok,
                       {k: f"{v:.2e}" for k, v in worst.items()})


def rsm_ratio(task, d: int, runs: int, seed: int) -> tuple[float, float, float, float]:
    """Mean (L_max - L_rsm) and (L_max - L_min) on one instance."""
    table = enumerate_values(linear_oracle(task), d)
    l_max, l_min = float(table.max()), float(table.min())
    cols = DenseColumns(task.features)
    rng = np.random.default_rng(seed)
    gains = np.empty(runs)
    for r in range(runs):
        mask = rsm(lambda m: LinearOracle(cols, task.y, m), d, rng)
        idx = int(np.dot(mask, 1 << np.arange(d)))
        gains[r] = l_max - table[idx]
    return float(gains.mean()), l_max - l_min, l_max, l_min


def check_rsm_ratio(n_instances: int = 5, d: int = 8, runs: int = 300, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = np.inf
    for k in range(n_instances):
        task = random_task(rng, 6, d)
        mean_gain, spread, _, _ = rsm_ratio(task, d, runs, seed + k)
        if spread > 0:
            worst = min(worst, mean_gain / spread)
    return CheckResult("double greedy reaches half of the range in expectation", worst >= 0.48,
                       {"instances": n_instances, "runs": runs, "min_ratio": round(worst, 4)})


def check_cache_consistency(n_flips: int = 10_000, seed: int = 4, fault: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    task = random_task(rng, 40, 16)
    orc = linear_oracle(task, -0.5, 0.5, refresh_every=10 ** 9)
    if fault:
        orc._fault_sign = -1.0
    worst_marg = 0.0
    for _ in range(n_flips):
        i = int(rng.integers(16))
        if rng.random() < 0.2:
            expect = orc.evaluate(np.logical_xor(orc.mask, np.eye(16, dtype=bool)[i])) - orc.evaluate()
            worst_marg = max(worst_marg, abs(orc.marginal(i) - expect))
        orc.apply_flip(i)
    drift = orc.drift()
    ok = drift <= 1e-8 and worst_marg <= 1e-8
    return CheckResult("incremental margins match recomputation", ok,
                       {"flips": n_flips, "drift": f"{drift:.2e}", "marginal_err": f"{worst_marg:.2e}"})


def _output_from_activation(model, l: int, post):
    """Model output with the post-ReLU activations of layer ``l`` replaced."""
    layer = model.layers[l]
    y = netmodel._post_to_out(layer, post)
    for upper in model.layers[l + 1:]:
        y = y.reshape((y.shape[0],) + tuple(upper.in_shape))
        y = netmodel._post_to_out(upper, netmodel.relu(netmodel._layer_pre(upper, upper.weights.dense(), y)))
    return y.reshape(y.shape[0], -1) @ model.a + model.b


def check_linearization(seed: int = 5, n_points: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    arch = {"layers": [{"kind": "conv", "filters": 3, "kernel": 3, "pool": 2},
                       {"kind": "dense", "units": 6}, {"kind": "dense", "units": 4}]}
    model = netmodel.build_model(arch, (1, 8, 8), 1, seed)
    exact_err = 0.0
    fd_err = 0.0
    h = 1e-6
    for _ in range(n_points):
        x = rng.random(64)
        f, _ = netmodel.forward(model, x)
        cache = netmodel.forward_batch(model, x)
        for l in range(len(model.layers)):
            ahat, bhat = netmodel.linearize(model, x, l)
            exact_err = max(exact_err, abs(netmodel.linearized_output(model, x, l, ahat, bhat) - f))
            post = netmodel.relu(cache.pre[l])
            flat = post.reshape(-1)
            for r in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                bumped = flat.copy()
                bumped[r] += h
                up = _output_from_activation(model, l, bumped.reshape(post.shape))[0]
                bumped[r] -= 2 * h
                down = _output_from_activation(model, l, bumped.reshape(post.shape))[0]
                fd = (up - down) / (2 * h)
                fd_err = max(fd_err, abs(fd - ahat[r]) / max(1.0, abs(fd)))
    ok = exact_err <= 1e-10 and fd_err <= 1e-4
    return CheckResult("linearization exact at anchor, gradients match differences", ok,
                       {"anchor_err": f"{exact_err:.2e}", "fd_rel_err": f"{fd_err:.2e}"})


def check_gcd(n_instances: int = 20, d: int = 10, seed: int = 6) -> CheckResult:
    rng = np.random.default_rng(seed)
    monotone = True
    gaps = []
    for _ in range(n_instances):
        task = random_task(rng, 12, d, -1.0, 1.0)
        orc = linear_oracle(task, *random_levels(rng), mask=rng.random(d) < 0.5)
        hist = []
        for _ in range(3):
            gcd(orc, rng.permutation(d), hist, check=False)
        monotone &= bool(np.all(np.diff(hist) <= 1e-12))
        table = enumerate_values(lambda m: orc.evaluate(m), d)
        gaps.append(hist[-1] - float(table.min()))
    return CheckResult("GCD loss sequence non-increasing", monotone,
                       {"instances": n_instances, "d": d, "max_gap_to_optimum": f"{max(gaps):.3e}",
                        "mean_gap": f"{np.mean(gaps):.3e}"})


def run_all(fault: bool = False, quick: bool = False) -> list:
    scale = 5 if quick else 1
    return [
        check_linear_supermodular(100 // scale),
        check_neuron_supermodular(50 // scale),
        check_mixed_sign_violation(),
        check_surrogate_bounds(n_pairs=100 // scale),
        check_rsm_ratio(runs=300 // scale if not quick else 200),
        check_cache_consistency(fault=fault),
        check_linearization(),
        check_gcd(20 // scale),
    ]
