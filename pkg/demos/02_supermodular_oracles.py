"""
Set-function oracles over weight bits
=====================================

The logistic loss of a binary linear classifier is a set function of the
bits that are on.  On non-negative inputs it is supermodular; with inputs of
both signs it generally is neither.
"""
import numpy as np

from lowbit.dataio import BinaryTask
from lowbit.oracle import (DenseColumns, LinearOracle, check_supermodular, posneg_surrogate_loss,
                           zero_one_loss)

rng = np.random.default_rng(0)
X = rng.random((20, 6))
y = np.where(rng.random(20) < 0.5, 1.0, -1.0)

# the oracle caches margins, so a marginal costs O(n) instead of O(nd)
f = LinearOracle(DenseColumns(X), y, None, low=-0.5, step=1.0)
print("f(empty) =", round(f.value, 4))
for i in range(3):
    print(f"marginal({i}) = {f.marginal(i):+.4f}")

report = check_supermodular(f, 6)
print("non-negative inputs:", report.n_checked, "pairs,", report.n_violations, "violations")

# one mixed-sign sample already breaks it
mixed = LinearOracle(DenseColumns(np.array([[1.0, -1.0, 0.5]])), np.array([1.0]))
print("mixed-sign inputs:", check_supermodular(mixed, 3).n_violations, "violations")

# splitting x into positive and negative parts restores supermodularity and
# gives a bound on the number of errors
task = BinaryTask(rng.normal(size=(20, 6)), y)
w = np.where(rng.random(6) < 0.5, 0.5, -0.5)
print("errors", zero_one_loss(w, task), "<= bound", round(posneg_surrogate_loss(w, task), 3))
print("bound supermodular:", check_supermodular(
    lambda m: posneg_surrogate_loss(np.where(m, 0.5, -0.5), task), 6).ok)
