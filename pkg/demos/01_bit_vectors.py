"""
Binary, ternary and multi-bit weight vectors
============================================

A weight vector is a bit pattern plus two levels (alpha, beta).  Ternary and
multi-bit weights are signed sums of such patterns.
"""
import numpy as np

from lowbit import quantcore as qc

# one bit per weight; the levels map bit 0 to alpha and bit 1 to beta
levels = qc.QuantLevels.he(8)
w = qc.BinaryWeightVector.from_mask([1, 0, 0, 1, 1, 0, 1, 0], levels)
print("levels", levels.alpha, levels.beta)
print("dense ", np.round(w.dense(), 3))

# flipping a bit moves one coordinate by +-(beta - alpha)
w2, delta = qc.flip(w, 1)
print("flip 1 delta", round(delta, 3), "support", sorted(w2.support))

# ternary weights are the difference of two 0/1 patterns
t = qc.ternary(qc.BinaryWeightVector.from_mask([1, 0, 1, 1]),
               qc.BinaryWeightVector.from_mask([0, 1, 1, 0]), scale=0.5)
print("ternary", qc.compose(t))

# B planes with ceil(B/2) positive and floor(B/2) negative signs
m = qc.new_multibit(6, 3, beta=0.3, init="random", seed=0)
print("3-bit signs", m.signs, "values", np.round(qc.compose(m), 3))

# the on-disk format packs 8 weights per byte after a small header
blob = qc.serialize(w)
print("serialized", len(blob), "bytes:", blob[:4], "...")
assert qc.deserialize(blob) == w
