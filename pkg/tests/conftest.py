import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from confreach.core import Interval  # noqa: E402
from confreach.system import MountainCarParams, NoiseProfile, default_controller, generate_dataset  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_data():
    """1000 closed-loop rollouts on the default heteroskedastic profile."""
    return generate_dataset(
        1000, Interval(-0.55, -0.45), default_controller(), NoiseProfile(), MountainCarParams(), 90, 11
    )


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(
        120, Interval(-0.55, -0.45), default_controller(), NoiseProfile(), MountainCarParams(), 90, 5
    )
