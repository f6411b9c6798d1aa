"""
Layerwise training of a binary network
======================================

Each hidden unit is optimized as a set function of its weight bits, with the
layers above replaced by their first-order expansion around the current
weights.  The real-valued output layer is refitted after every layer.
"""
from pathlib import Path

from _data import task

from lowbit import dataio, netmodel, optim

train, real = task("train", range(5), range(5, 10))
test, _ = task("test", range(5), range(5, 10))
train = dataio.subsample(train, 0.05 if real else 0.5, seed=0)

# the expansion is exact at the anchor
model = netmodel.build_model(netmodel.architecture("fc3"), train.image_shape, bits=1, seed=0)
x = test.features[0]
ahat, bhat = netmodel.linearize(model, x, 0)
print("f(x) =", round(netmodel.forward(model, x)[0], 6),
      " linearized =", round(netmodel.linearized_output(model, x, 0, ahat, bhat), 6))

for method in ("gcd", "hybrid"):
    model = netmodel.build_model(netmodel.architecture("fc3"), train.image_shape, bits=1, seed=0)
    cfg = optim.OptimizerConfig(n_iter=2, method=method)
    _, report = optim.multilayer_train(model, train, cfg, test)
    for r in report.rows:
        print(f"{method:6s} sweep {r['sweep']}: train loss {r['train_loss']:.4f}  "
              f"test acc {r['test_acc']:.3f}  ({r['seconds']:.1f}s)")

out = Path("fc3_demo_model")
netmodel.save_model(out, model)
print(f"saved to {out}/:", sorted(p.name for p in out.iterdir()))
