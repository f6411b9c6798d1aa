import csv
import itertools
import json

import numpy as np
import pytest

from lowbit import netmodel, optim
from lowbit.checks import random_task
from lowbit.dataio import BinaryTask
from lowbit.optim import ConfigError, OptimizerConfig
from lowbit.oracle import (DenseColumns, LinearOracle, TableOracle,
                           logistic_loss)
from lowbit.quantcore import QuantLevels, compose, new_multibit


def table_of(fn, d):
    return np.array([fn(np.array([(m >> i) & 1 for i in range(d)], dtype=bool))
                     for m in range(1 << d)], dtype=float)


def convex_of_modular(rng, d):
    """Random supermodular table: convex function of a non-negative modular
    function plus an arbitrary modular term."""
    c = rng.uniform(0.0, 1.0, d)
    lin = rng.normal(0.0, 1.0, d)
    k = rng.uniform(0.5, 3.0)
    return table_of(lambda s: k * float(c @ s) ** 2 + float(lin @ s), d)


# -- config ------------------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"n_iter": 0}, {"temperature": 0.0}, {"order": "random"},
                                {"method": "sgd"}, {"surrogate": "x"},
                                {"multibit_objective": "y"}, {"layer_methods": ["adam"]}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        OptimizerConfig(**kw)


def test_coordinate_order():
    assert optim.coordinate_order(4).tolist() == [0, 1, 2, 3]
    perm = optim.coordinate_order(6, "permutation", np.random.default_rng(0))
    assert sorted(perm.tolist()) == list(range(6))
    with pytest.raises(ConfigError):
        optim.coordinate_order(3, "permutation")


# -- gcd ---------------------------------------------------------------------------------

def test_gcd_hand_example():
    # f(empty)=3, f({0})=1, f({1})=2, f({0,1})=2
    orc = TableOracle([3.0, 1.0, 2.0, 2.0])
    hist = []
    mask = optim.gcd(orc, history=hist)
    assert mask.tolist() == [True, False]
    assert hist == [3.0, 1.0]


def test_gcd_takes_ties():
    orc = TableOracle(np.zeros(8))
    assert optim.gcd(orc).all()
    assert orc.n_flips == 3


def test_gcd_monotone_and_local(rng):
    for _ in range(20):
        task = random_task(rng, 15, 8, -1.0, 1.0)
        orc = LinearOracle(DenseColumns(task.features), task.y, rng.random(8) < 0.5, -0.5, 1.0)
        hist = []
        for _ in range(10):
            optim.gcd(orc, history=hist)
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
        # after enough passes no single flip strictly helps
        assert min(orc.marginal(i) for i in range(8)) >= -1e-9


def test_gcd_detects_broken_oracle():
    class Liar(TableOracle):
        def marginal(self, i):
            return -1.0
    with pytest.raises(optim.MonotonicityError):
        optim.gcd(Liar([0.0, 1.0]))


# -- rsm ---------------------------------------------------------------------------------

def test_rsm_d1_examples():
    rng = np.random.default_rng(0)
    # setting the bit costs 1: the lower move has a'=0, so the upper frontier clears it
    assert optim.rsm(lambda m: TableOracle([0.0, 1.0], m), 1, rng).tolist() == [False]
    assert optim.rsm(lambda m: TableOracle([1.0, 0.0], m), 1, rng).tolist() == [True]
    # flat: both gains are 0 and the lower move is taken
    trace = []
    assert optim.rsm(lambda m: TableOracle([2.0, 2.0], m), 1, rng, trace=trace).tolist() == [True]
    assert trace == [(0, 0.0, 0.0, True)]


def test_rsm_deterministic_per_seed():
    table = convex_of_modular(np.random.default_rng(1), 9)
    runs = [optim.rsm(lambda m: TableOracle(table, m), 9, np.random.default_rng(s))
            for s in (5, 5, 6)]
    assert np.array_equal(runs[0], runs[1])


def test_rsm_marginal_count():
    made = []

    def make(mask):
        made.append(TableOracle(convex_of_modular(np.random.default_rng(2), 7), mask))
        return made[-1]

    mask, lower = optim.rsm(make, 7, np.random.default_rng(0), return_oracle=True)
    assert len(made) == 2
    assert [o.n_marginals for o in made] == [7, 7]
    assert np.array_equal(made[0].mask, made[1].mask)
    assert lower is made[0] and np.array_equal(mask, lower.mask)


def test_rsm_probabilities_follow_gains():
    table = convex_of_modular(np.random.default_rng(3), 6)
    rng = np.random.default_rng(9)
    for _ in range(50):
        trace = []
        optim.rsm(lambda m: TableOracle(table, m), 6, rng, trace=trace)
        for i, a, b, took_lower in trace:
            if a <= 0 < b:
                assert not took_lower
            if b <= 0 < a:
                assert took_lower


def test_rsm_half_range_d10():
    rng = np.random.default_rng(4)
    table = convex_of_modular(rng, 10)
    f_max, f_min = table.max(), table.min()
    weights = 1 << np.arange(10)
    runs = 2000
    vals = np.empty(runs)
    for r in range(runs):
        mask = optim.rsm(lambda m: TableOracle(table, m), 10, rng)
        vals[r] = table[int(mask @ weights)]
    ratio = (f_max - vals.mean()) / (f_max - f_min)
    assert ratio >= 0.48


# -- single layer ------------------------------------------------------------------------

def test_train_single_binary(rng):
    task = random_task(rng, 30, 10, -1.0, 1.0)
    lv = QuantLevels(-0.3, 0.3)
    hist = []
    w = optim.train_single_binary(task, lv, "gcd", OptimizerConfig(n_iter=3), hist)
    assert w.levels == lv and w.d == 10
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert LinearOracle(DenseColumns(task.features), task.y, w.mask, -0.3, 0.6).value == \
        pytest.approx(hist[-1])
    w2 = optim.train_single_binary(task, lv, "rsm", OptimizerConfig(seed=1))
    assert w2 == optim.train_single_binary(task, lv, "rsm", OptimizerConfig(seed=1))
    with pytest.raises(ConfigError):
        optim.train_single_binary(task, lv, "sgd")


# -- multi-bit ---------------------------------------------------------------------------

@pytest.mark.parametrize("method", ["gcd", "rsm"])
def test_multibit_one_plane_reduces_to_binary(method, rng):
    task = random_task(rng, 25, 9)
    cfg = OptimizerConfig(seed=3)
    m0 = new_multibit(9, 1, 0.4, "random", 2)
    m = optim.multibit_cd(task, m0, cfg, method)
    lv = QuantLevels(0.0, m0.scale)
    w = optim.train_single_binary(task, lv, method, cfg, init=m0.components[0])
    assert np.array_equal(m.components[0].mask, w.mask)


def test_multibit_ternary_exhaustive():
    rng = np.random.default_rng(11)
    task = random_task(rng, 10, 4)
    m0 = new_multibit(4, 2, 1.0, "random", 0)
    s = m0.scale
    X = task.features
    best = min(logistic_loss(X @ np.array(v), task.y)
               for v in itertools.product((-s, 0.0, s), repeat=4))
    init = logistic_loss(X @ compose(m0), task.y)
    for method in ("gcd", "rsm"):
        hist = []
        m = optim.multibit_cd(task, m0, OptimizerConfig(n_iter=3), method, hist)
        final = logistic_loss(X @ compose(m), task.y)
        assert set(np.round(compose(m) / s, 12).tolist()) <= {-1.0, 0.0, 1.0}
        assert best - 1e-12 <= final
        assert hist[-1] == pytest.approx(final)
        if method == "gcd":
            assert final <= init + 1e-12
            assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_multibit_gcd_finds_optimum_from_zero():
    # with non-negative inputs and one feature the optimum is found coordinatewise
    task = BinaryTask(np.array([[1.0], [0.5], [0.2]]), np.array([1.0, 1.0, -1.0]))
    m = optim.multibit_cd(task, new_multibit(1, 2, 1.0, "all_alpha"), OptimizerConfig(n_iter=2),
                          "gcd")
    assert compose(m).tolist() == [1.0]


# -- sag ---------------------------------------------------------------------------------

def test_sag_zero_features():
    w = optim.sag(np.zeros((10, 3)), np.ones(10), epochs=5)
    assert np.array_equal(w, np.zeros(3))


def test_sag_zero_epochs():
    assert np.array_equal(optim.sag(np.ones((4, 2)), np.ones(4), epochs=0), np.zeros(2))
    assert optim.sag(np.ones((4, 2)), np.ones(4), epochs=0, w0=[1.0, 2.0]).tolist() == [1.0, 2.0]


def test_sag_separable():
    X = np.array([[1.0, 0.2], [0.8, -0.1], [-1.0, 0.1], [-0.7, 0.3]])
    y = np.array([1.0, 1.0, -1.0, -1.0])
    w = optim.sag(X, y, epochs=100, lam=1e-4)
    assert np.all(np.sign(X @ w) == y)


def test_sag_matches_gradient_descent(rng):
    X = rng.normal(size=(40, 4))
    y = np.where(X @ np.array([1.0, -2.0, 0.5, 0.0]) + rng.normal(size=40) > 0, 1.0, -1.0)
    lam = 0.05
    # reference: full-batch gradient descent on the same objective
    v = np.zeros(4)
    for _ in range(5000):
        m = y * (X @ v)
        g = -(X * (y / (1.0 + np.exp(m)))[:, None]).mean(axis=0) + lam * v
        v -= 0.5 * g
    w = optim.sag(X, y, epochs=300, lam=lam, seed=1)
    assert np.max(np.abs(w - v)) <= 1e-3


# -- layerwise training ------------------------------------------------------------------

def test_layer_methods_mapping():
    cfg = OptimizerConfig(method="hybrid")
    assert optim.layer_methods(4, cfg) == ["gcd", "gcd", "rsm", "rsm"]
    assert optim.layer_methods(3, cfg) == ["gcd", "gcd", "rsm"]
    assert optim.layer_methods(1, cfg) == ["gcd"]
    assert optim.layer_methods(2, OptimizerConfig(method="rsm")) == ["rsm", "rsm"]
    assert optim.layer_methods(2, OptimizerConfig(layer_methods=["rsm", "gcd"])) == ["rsm", "gcd"]
    with pytest.raises(ConfigError):
        optim.layer_methods(3, OptimizerConfig(layer_methods=["rsm", "gcd"]))


def _mlp_task(rng, n=60, d=12):
    X = rng.random((n, d))
    y = np.where(X[:, :6].sum(axis=1) > X[:, 6:].sum(axis=1), 1.0, -1.0)
    return BinaryTask(X, y)


def test_two_layer_single_unit(rng):
    task = _mlp_task(rng)
    model = netmodel.build_model({"layers": [{"kind": "dense", "units": 1}]}, (12,), 1, 0)
    model, report = optim.two_layer_train(model, task, OptimizerConfig(n_iter=2, method="gcd"))
    assert [r["sweep"] for r in report.rows] == [1, 2]
    assert report.rows[-1]["train_loss"] == pytest.approx(optim.evaluate_model(model, task)[0])


def test_two_layer_needs_units(rng):
    model = netmodel.build_model({"layers": [{"kind": "dense", "units": 2}]}, (12,), 1, 0)
    model.layers[0].weights.bits = model.layers[0].weights.bits[:, :0]
    with pytest.raises((ConfigError, netmodel.ArchitectureError)):
        optim.two_layer_train(model, _mlp_task(rng))
    deep = netmodel.build_model({"layers": [{"kind": "dense", "units": 2}] * 2}, (12,), 1, 0)
    with pytest.raises(ConfigError):
        optim.two_layer_train(deep, _mlp_task(rng))


def test_cold_temperature():
    rng = np.random.default_rng(0)
    task = _mlp_task(rng)
    arch = {"layers": [{"kind": "dense", "units": 4}, {"kind": "dense", "units": 3}]}
    for method in ("gcd", "rsm"):
        model = netmodel.build_model(arch, (12,), 1, 1)
        cfg = OptimizerConfig(temperature=1e-12, method=method)
        stats = optim.train_layer(model, 0, task, method, cfg, rng)
        assert stats.accepted + stats.reverted == 4
        # every increase is reverted; GCD on the exact objective never increases
        assert stats.reverted == stats.increases
        if method == "gcd":
            assert stats.increases == 0


def test_top_layer_gcd_not_worse():
    # the top quantized layer feeds the output linearly, so its linearization
    # is exact and GCD on it cannot raise the true loss
    rng = np.random.default_rng(2)
    task = _mlp_task(rng)
    arch = {"layers": [{"kind": "dense", "units": 5}, {"kind": "dense", "units": 3}]}
    for bits in (1, 2):
        model = netmodel.build_model(arch, (12,), bits, 3)
        before = optim.evaluate_model(model, task)[0]
        stats = optim.train_layer(model, 1, task, "gcd", OptimizerConfig(), rng)
        assert stats.increases == 0
        assert optim.evaluate_model(model, task)[0] <= before + 1e-12


def test_multilayer_report_and_hybrid(rng):
    task = _mlp_task(rng)
    arch = {"layers": [{"kind": "dense", "units": 4}] * 3}
    model = netmodel.build_model(arch, (12,), 1, 0)
    seen = []
    _, report = optim.multilayer_train(model, task, OptimizerConfig(method="hybrid"), test=task,
                                       on_sweep=lambda s, m, r: seen.append(s))
    assert seen == [1]
    assert report.meta["layer_methods"] == ["gcd", "gcd", "rsm"]
    row = report.rows[0]
    assert row["test_loss"] == pytest.approx(row["train_loss"])
    assert len(row["layers"]) == 3


def test_training_deterministic(rng):
    task = _mlp_task(rng)
    arch = {"layers": [{"kind": "dense", "units": 3}, {"kind": "dense", "units": 2}]}
    outs = []
    for _ in range(2):
        model = netmodel.build_model(arch, (12,), 2, 4)
        optim.multilayer_train(model, task, OptimizerConfig(method="rsm", seed=7))
        outs.append(netmodel.predict(model, task.features))
    assert np.array_equal(outs[0], outs[1])


def test_report_serialization(tmp_path):
    rep = optim.TrainReport(3)
    rep.add(1, 0.5, 0.6, 0.7, 1.25, layers=[{"accepted": 1}])
    rep.add(2, 0.4, seconds=2.0)
    data = json.loads(rep.to_json(timing=False))
    assert data["seed"] == 3 and all("seconds" not in r for r in data["rows"])
    assert json.loads(rep.to_json())["rows"][0]["seconds"] == 1.25
    assert rep.train_losses == [0.5, 0.4]
    path = tmp_path / "r.csv"
    rep.append_csv(path)
    rep.append_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == list(optim.TrainReport.CSV_COLUMNS)
    assert len(rows) == 5 and rows[1][:2] == ["1", "0.5"]


def test_evaluate_outputs():
    loss, acc = optim.evaluate_outputs([0.0, 2.0, -1.0], [1, 1, 1])
    assert acc == pytest.approx(1 / 3)
    assert loss == pytest.approx((np.log(2) + np.log1p(np.exp(-2)) + np.log1p(np.e)) / 3)
