"""
Greedy coordinate descent and randomized double greedy
======================================================

GCD flips one bit at a time and keeps every flip that does not raise the
loss.  RSM grows a lower solution from all-zeros and shrinks an upper one
from all-ones until they meet; in expectation it recovers at least half of
the gap between the worst and the best pattern.
"""
import numpy as np

from lowbit import optim
from lowbit.oracle import DenseColumns, LinearOracle, enumerate_values

rng = np.random.default_rng(1)
d = 10
X = rng.random((12, d))
y = np.where(rng.random(12) < 0.5, 1.0, -1.0)
cols = DenseColumns(X)


def make(mask):
    return LinearOracle(cols, y, mask, low=-0.5, step=1.0)


table = enumerate_values(make(None), d)
print(f"brute force over {table.size} patterns: min {table.min():.4f}  max {table.max():.4f}")

hist = []
orc = make(rng.random(d) < 0.5)
for _ in range(3):
    optim.gcd(orc, history=hist)
print(f"GCD: {hist[0]:.4f} -> {hist[-1]:.4f} in {len(hist) - 1} accepted flips")

vals = [make(optim.rsm(make, d, rng)).value for _ in range(500)]
share = (table.max() - np.mean(vals)) / (table.max() - table.min())
print(f"RSM: mean {np.mean(vals):.4f}, best {min(vals):.4f}, share of range recovered {share:.3f}")
