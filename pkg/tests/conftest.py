import numpy as np
import pytest

from trackfusion.emissions import ObservableLayout, ObservableModel
from trackfusion.hmm import AnnotatedHistory, HmmParams


def random_params(rng, n, dims_per_tracker=1, shared=0):
    """Dirichlet transition rows and uniform random shapes; returns ``(params, layout)``."""
    layout = ObservableLayout.uniform(n, dims_per_tracker, shared)
    N = 2**n
    a = rng.dirichlet(np.ones(N), size=N)
    p = rng.uniform(0.5, 6.0, (N, layout.m))
    q = rng.uniform(0.5, 6.0, (N, layout.m))
    return HmmParams(a, ObservableModel(p, q)), layout


def random_history(rng, T, m, n_states, max_annotations=None):
    frames = rng.uniform(0.02, 0.98, (T, m))
    k_max = T if max_annotations is None else min(T, max_annotations)
    k = int(rng.integers(0, k_max + 1))
    times = np.sort(rng.choice(T, size=k, replace=False))
    # bias annotations towards the all-correct state so most instances are feasible
    states = [int(rng.integers(0, n_states)) if rng.random() < 0.6 else 0 for _ in times]
    return AnnotatedHistory(frames, tuple(zip(times.tolist(), states)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts, one line per criterion, after the test report."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
