import numpy as np
import pytest
from hypothesis import settings
from scipy.special import expit

from catdif.prep import ItemFrame

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def synth_frame(seed, n_clusters=8, tau0=0.6, tau1=0.0, sizes=(15, 40), beta=(0.2, 0.3, 0.8, 0.0),
                item_id="X"):
    """Two-level logistic data: intercept, g, theta_K, theta_K:g plus cluster effects on (1, g)."""
    rng = np.random.default_rng(seed)
    n_j = rng.integers(sizes[0], sizes[1] + 1, n_clusters)
    cl = np.repeat(np.arange(n_clusters), n_j)
    n = len(cl)
    g = rng.integers(0, 2, n)
    tk = rng.normal(size=n)
    u0 = rng.normal(0, tau0, n_clusters)
    u1 = rng.normal(0, tau1, n_clusters)
    eta = beta[0] + beta[1] * g + beta[2] * tk + beta[3] * tk * g + u0[cl] + u1[cl] * g
    y = (rng.random(n) < expit(eta)).astype(np.int8)
    j = 3 * (cl + 1)  # sparse interval labels, as real frames have
    return ItemFrame(item_id, y, g.astype(np.int8), tk, tk + rng.normal(0, 0.3, n), j)


@pytest.fixture
def frame_factory():
    return synth_frame


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
