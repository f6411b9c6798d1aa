"""Shared loader for the demos: real MNIST when available, otherwise a small
synthetic stand-in so every script runs anywhere."""
import os

import numpy as np

from lowbit import dataio


def mnist_split(split):
    for root in (os.environ.get(dataio.DATA_DIR_ENV), "/root/data/mnist"):
        if root:
            try:
                return dataio.load_mnist_split(split, root), True
            except FileNotFoundError:
                pass
    rng = np.random.default_rng(0 if split == "train" else 1)
    n = 3000 if split == "train" else 1000
    labels = rng.integers(0, 10, n)
    protos = np.random.default_rng(42).random((10, 784)) ** 3
    X = np.clip(protos[labels] + rng.normal(0, 0.3, (n, 784)), 0, 1)
    return dataio.Dataset(X, labels, (1, 28, 28)), False


def task(split, pos, neg):
    ds, real = mnist_split(split)
    return dataio.make_binary_task(ds, pos, neg), real
