from datetime import datetime, timezone

import pytest
from hypothesis import HealthCheck, settings

from ensprecip.core import AccumulationWindow, Region, Site

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def site():
    return Site("S1", -1.5, 12.3, Region.WEST_SAHEL)


@pytest.fixture
def window():
    return AccumulationWindow(datetime(2010, 7, 1, 6, tzinfo=timezone.utc), 1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
