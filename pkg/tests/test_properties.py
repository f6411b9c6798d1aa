import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lowbit import optim, oracle, quantcore as qc
from lowbit.dataio import BinaryTask
from lowbit.oracle import DenseColumns, LinearOracle, check_supermodular

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@st.composite
def levels(draw):
    alpha = draw(st.floats(-2, 1, allow_nan=False))
    return qc.QuantLevels(alpha, alpha + draw(st.floats(0.01, 3, allow_nan=False)))


@st.composite
def binary_vectors(draw, max_d=200):
    d = draw(st.integers(1, max_d))
    mask = draw(arrays(bool, d))
    return qc.BinaryWeightVector.from_mask(mask, draw(levels()))


@st.composite
def tasks(draw, max_n=12, max_d=6, nonneg=False):
    n = draw(st.integers(1, max_n))
    d = draw(st.integers(1, max_d))
    elems = st.floats(0, 5, allow_nan=False) if nonneg else finite
    X = draw(arrays(float, (n, d), elements=elems))
    y = np.where(draw(arrays(bool, n)), 1.0, -1.0)
    return BinaryTask(X, y)


@given(binary_vectors())
def test_binary_roundtrip(w):
    assert qc.deserialize(qc.serialize(w)) == w


@given(st.integers(1, 60), st.integers(1, 5), st.floats(0.01, 4), st.integers(0, 2 ** 31))
def test_multibit_roundtrip_and_range(d, B, beta, seed):
    m = qc.new_multibit(d, B, beta, "random", seed)
    assert qc.deserialize(qc.serialize(m)) == m
    assert np.all(np.abs(qc.compose(m)) <= beta + 1e-12)


@given(binary_vectors(), st.data())
def test_flip_properties(w, data):
    i = data.draw(st.integers(0, w.d - 1))
    w1, delta = qc.flip(w, i)
    diff = w1.dense() - w.dense()
    assert np.count_nonzero(diff) == 1 and diff[i] == delta
    assert abs(delta) == w.levels.step
    assert qc.flip(w1, i)[0] == w


@given(st.integers(1, 50).flatmap(lambda d: st.tuples(arrays(bool, d), arrays(bool, d))),
       st.floats(0.01, 5))
def test_ternary_values(masks, s):
    m1, m2 = masks
    t = qc.compose(qc.ternary(qc.BinaryWeightVector.from_mask(m1),
                              qc.BinaryWeightVector.from_mask(m2), s))
    assert np.allclose(t, s * (m1.astype(float) - m2))
    assert set(np.round(t / s, 12).tolist()) <= {-1.0, 0.0, 1.0}


@given(arrays(float, st.integers(0, 30), elements=finite))
def test_pos_neg_split(x):
    pos, neg = oracle.pos_neg_split(x)
    assert np.array_equal(pos + neg, x)
    assert np.all(pos >= 0) and np.all(neg <= 0) and np.all(pos * neg == 0)


@settings(max_examples=50)
@given(tasks(nonneg=True), levels())
def test_linear_oracle_supermodular(task, lv):
    f = LinearOracle(DenseColumns(task.features), task.y, None, lv.alpha, lv.step)
    assert check_supermodular(f, task.d, 1e-9).ok


@settings(max_examples=50)
@given(tasks())
def test_posneg_bounds_zero_one(task):
    rng = np.random.default_rng(0)
    for _ in range(8):
        w = rng.random(task.d) < 0.5
        errs = oracle.zero_one_loss(w * 1.0, task, per_sample=True)
        assert np.all(oracle.posneg_surrogate_loss(w * 1.0, task, per_sample=True) >= errs - 1e-9)


@settings(max_examples=40, deadline=None)
@given(tasks(max_n=20, max_d=10), st.integers(1, 64),
       st.lists(st.integers(0, 9), min_size=1, max_size=300))
def test_cache_invariant(task, refresh, flips):
    orc = LinearOracle(DenseColumns(task.features), task.y, None, -0.5, 1.0,
                       refresh_every=refresh)
    for i in flips:
        i %= task.d
        if i % 2:
            m = orc.marginal(i)
            flipped = orc.mask.copy()
            flipped[i] = not flipped[i]
            assert abs(m - (orc.evaluate(flipped) - orc.evaluate(orc.mask))) <= 1e-8
        orc.apply_flip(i)
        assert orc.drift() <= 1e-9
        assert abs(orc.value - orc.evaluate(orc.mask)) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(tasks(max_d=8), st.integers(0, 2 ** 31))
def test_gcd_never_increases(task, seed):
    rng = np.random.default_rng(seed)
    orc = LinearOracle(DenseColumns(task.features), task.y, rng.random(task.d) < 0.5, -1.0, 2.0)
    hist = []
    optim.gcd(orc, rng.permutation(task.d), hist)
    assert all(b <= a + 1e-9 * max(1.0, abs(a)) for a, b in zip(hist, hist[1:]))


@settings(max_examples=30, deadline=None)
@given(tasks(max_d=8, nonneg=True), st.integers(0, 2 ** 31))
def test_rsm_frontiers_meet(task, seed):
    cols = DenseColumns(task.features)
    mask = optim.rsm(lambda m: LinearOracle(cols, task.y, m), task.d, np.random.default_rng(seed))
    assert mask.shape == (task.d,)
