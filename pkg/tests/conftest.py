import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stenoseg.autodiff import precision

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion; the lines are printed at the end of the run."""

    def record(name: str, ok: bool, detail: str = "") -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scan_time_fit():
    """R^2 of a straight-line fit of sequential-scan wall time against length.

    Lengths are timed in interleaved rounds with garbage collection paused, and
    the best time per length is kept, so a slow stretch on the machine cannot
    bend the curve at a few lengths only.
    """
    import gc
    import time

    from stenoseg.ssm import linear_recurrence_sequential

    def fit(lengths=tuple(2**k for k in range(10, 17)), rounds=7, channels=16):
        r = np.random.default_rng(0)
        inputs = {L: (r.uniform(0, 1, size=(L, channels)), r.normal(size=(L, channels))) for L in lengths}
        best = {L: float("inf") for L in lengths}
        gc.disable()
        try:
            for _ in range(rounds):
                for L in lengths:
                    t0 = time.perf_counter()
                    linear_recurrence_sequential(*inputs[L])
                    best[L] = min(best[L], time.perf_counter() - t0)
        finally:
            gc.enable()
        x = np.array(lengths, dtype=float)
        y = np.array([best[L] for L in lengths])
        slope, icept = np.polyfit(x, y, 1)
        r2 = 1 - ((y - (slope * x + icept)) ** 2).sum() / ((y - y.mean()) ** 2).sum()
        return float(r2), list(y)

    return fit
