import os
from pathlib import Path

import numpy as np
import pytest

from qbp.data import load_mnist

ROOT = Path(__file__).resolve().parent.parent
ACCEPTANCE_LINES: list[str] = []


def mnist_dir() -> Path | None:
    d = Path(os.environ.get("QBP_DATA_DIR", ROOT / "data" / "mnist"))
    ok = all((d / f).exists() or (d / (f + ".gz")).exists() for f in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"))
    return d if ok else None


@pytest.fixture(scope="session")
def mnist_path():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found; put them in data/mnist or set QBP_DATA_DIR")
    return d


@pytest.fixture(scope="session")
def mnist(mnist_path):
    return load_mnist(mnist_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
