import numpy as np
import pytest

from fddh.diagnostics import synth_dataset
from fddh.pipeline import fit_pipeline
from fddh.trainer import Hyperparams


@pytest.fixture(scope="session")
def small_data():
    """Separable two-modality data: 600 samples, 8 classes."""
    return synth_dataset(600, 8, 24, 16, 0.1, seed=3)


@pytest.fixture(scope="session")
def small_pipeline(small_data):
    x1, x2, labels = small_data
    return fit_pipeline(x1, x2, labels, Hyperparams(q=16, max_iters=20), k=128, m=200, seed=0)


def random_orthonormal(rng, rows, cols):
    return np.linalg.qr(rng.standard_normal((rows, cols)))[0]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
