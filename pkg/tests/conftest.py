import os
from pathlib import Path

import numpy as np
import pytest

from satgrad.data import DATA_DIR_ENV, load_mnist

FALLBACK_DATA_DIRS = (Path("/root/data/mnist"), Path(__file__).resolve().parents[1] / "data" / "mnist")


def mnist_dir():
    env = os.environ.get(DATA_DIR_ENV)
    candidates = ([Path(env)] if env else []) + list(FALLBACK_DATA_DIRS)
    for d in candidates:
        if (d / "t10k-images-idx3-ubyte").exists() or (d / "t10k-images-idx3-ubyte.gz").exists():
            return d
    return None


@pytest.fixture(scope="session")
def mnist_test():
    d = mnist_dir()
    if d is None:
        pytest.skip(f"MNIST not found; set ${DATA_DIR_ENV}")
    return load_mnist(d, "test")


def digit_like(rng, n, dim=784):
    """Sparse images in [0, 1] with a few saturated pixels, MNIST-style."""
    x = rng.uniform(0, 1, size=(n, dim))
    x[rng.uniform(size=(n, dim)) < 0.8] = 0.0
    x[rng.uniform(size=(n, dim)) < 0.05] = 1.0
    return x


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
