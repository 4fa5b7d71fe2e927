import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from blab.classifier import TrainConfig, train
from blab.data import LabeledDataset, make_longtail_mixture

settings.register_profile(
    "blab", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("blab")


@pytest.fixture(scope="session")
def benchmark_small():
    """Small long-tailed mixture (C=6, d=4) with a classifier trained on it."""
    data, spec = make_longtail_mixture(6, 4, 120, 20, 2.0, 1.0, seed=3)
    clf = train(data, TrainConfig(epochs=30, seed=3))
    return data, spec, clf


def two_blobs(n=100, d=2, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(-gap / 2, 1.0, (n, d)), rng.normal(gap / 2, 1.0, (n, d))])
    return LabeledDataset(x, np.repeat([0, 1], n), 2)


# Acceptance results, one (criterion, passed, detail) per check; printed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
