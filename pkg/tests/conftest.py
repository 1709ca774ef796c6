import os

import numpy as np
import pytest

from morphdict.dataset import DATA_DIR_ENV

FALLBACK_DATA_DIR = "/root/data/mnist"


def mnist_dir():
    for d in (os.environ.get(DATA_DIR_ENV), FALLBACK_DATA_DIR):
        if d and os.path.exists(os.path.join(d, "t10k-images-idx3-ubyte")) or \
                d and os.path.exists(os.path.join(d, "t10k-images-idx3-ubyte.gz")):
            return d
    return None


@pytest.fixture(scope="session")
def data_dir():
    d = mnist_dir()
    if d is None:
        pytest.skip(f"MNIST not found; set ${DATA_DIR_ENV}")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(criterion: str, ok: bool, detail: str):
    """Log one acceptance verdict; the summary is printed at session end."""
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
