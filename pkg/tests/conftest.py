import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from batt.dataset_io import Dataset, Split  # noqa: E402


def random_dataset(n=40, shape=(1, 8, 8), k=10, seed=0, split=Split.TRAIN):
    rng = np.random.default_rng(seed)
    images = rng.random((n, *shape)).astype(np.float32)
    labels = np.arange(n) % k
    return Dataset(images, labels, k, split, f"random:{seed}")


@pytest.fixture
def tiny_train():
    return random_dataset(60, seed=1)


@pytest.fixture
def tiny_test():
    return random_dataset(30, seed=2, split=Split.TEST)


# the first call into a JIT-compiled kernel can take a second; timing deadlines are noise here
settings.register_profile("batt", deadline=None)
settings.load_profile("batt")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
