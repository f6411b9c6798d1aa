"""
Single-layer classifiers with 1, 2 and 3 bits per weight
========================================================

Digits 0-2 against 3-5.  Binary weights take the He levels +-sqrt(2/784);
multi-bit weights cycle RSM over their bit planes.  Full-precision logistic
regression (SAG) is the reference.
"""
import math

from _data import task

from lowbit import optim, quantcore as qc

train, real = task("train", [0, 1, 2], [3, 4, 5])
test, _ = task("test", [0, 1, 2], [3, 4, 5])
print(f"{'MNIST' if real else 'synthetic digits'}: {train.n} train, {test.n} test")

d = train.d
cfg = optim.OptimizerConfig(seed=0)
w = optim.train_single_binary(train, qc.QuantLevels.symmetric(0.5), "rsm", cfg)
loss, acc = optim.evaluate_outputs(test.features @ w.dense(), test.y)
print(f"1-bit RSM   test acc {acc:.3f}  loss {loss:.3f}")

for bits in (2, 3):
    m = qc.new_multibit(d, bits, math.sqrt(2 / d) * -(-bits // 2))
    m = optim.multibit_cd(train, m, optim.OptimizerConfig(n_iter=3), "rsm")
    acc = optim.evaluate_outputs(test.features @ qc.compose(m), test.y)[1]
    print(f"{bits}-bit RSM   test acc {acc:.3f}")

v = optim.sag(train.features, train.y, epochs=10)
print("SAG float   test acc %.3f" % optim.evaluate_outputs(test.features @ v, test.y)[1])

# the binary weights as a 28x28 picture of which pixels vote for 0-2
print("\n".join("".join("#" if b else "." for b in row[::2])
                for row in w.mask.reshape(28, 28)[::2]))
