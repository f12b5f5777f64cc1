import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mstrain import memtrack

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(autouse=True)
def tracker():
    """Every test gets a private recording tracker."""
    tr = memtrack.Tracker(record_events=True)
    with memtrack.use_tracker(tr):
        yield tr


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        ok, title, detail = RESULTS[num]
        terminalreporter.write_line(f"criterion {num:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
