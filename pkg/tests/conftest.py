import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lowbit import dataio  # noqa: E402

DEFAULT_MNIST = Path("/root/data/mnist")


def mnist_root():
    root = os.environ.get(dataio.DATA_DIR_ENV)
    for cand in ([Path(root)] if root else []) + [DEFAULT_MNIST]:
        try:
            dataio.mnist_paths("train", cand)
            dataio.mnist_paths("test", cand)
            return cand
        except FileNotFoundError:
            continue
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    root = mnist_root()
    if root is None:
        pytest.skip(f"MNIST not found; set {dataio.DATA_DIR_ENV}")
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fake_mnist(tmp_path_factory):
    from fakedata import write_fake_mnist
    return write_fake_mnist(tmp_path_factory.mktemp("mnist"))
