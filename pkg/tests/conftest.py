import os
from pathlib import Path

import numpy as np
import pytest

from merlab.nn import Example, NetworkSpec, init_params

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_dir() -> Path | None:
    for cand in (os.environ.get("MERLAB_DATA_DIR"), "/root/data/mnist"):
        if cand and all((Path(cand) / f).exists() for f in MNIST_FILES):
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def mnist_base():
    from merlab.streams import load_mnist
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST files not found (set MERLAB_DATA_DIR)")
    return load_mnist(d)


@pytest.fixture
def tiny_spec():
    return NetworkSpec(5, (4, 3), 3)


@pytest.fixture
def tiny_params(tiny_spec):
    p = init_params(tiny_spec, 3)
    # nonzero biases so every block of the gradient is exercised
    p.values[:] += np.random.default_rng(0).normal(0, 0.1, p.values.size)
    return p


def random_examples(n, dim, classes, seed=0, task_count=1, density=1.0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.uniform(0, 1, dim) * (rng.uniform(size=dim) < density)
        out.append(Example(x, int(rng.integers(classes)), int(i * task_count // n)))
    return out


# one line per acceptance criterion, echoed in the terminal summary
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
