import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from rlplace.lidar import SweepCache  # noqa: E402
from rlplace.perception import TrainConfig, build_training_samples, train_predictor  # noqa: E402
from rlplace.scene import generate_scene  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(7, n_mounts=6, n_vehicles=10, n_frames=6)


@pytest.fixture(scope="session")
def small_cache(small_scene):
    return SweepCache(small_scene)


@pytest.fixture(scope="session")
def trained_model(small_scene, small_cache):
    samples = build_training_samples(small_scene, 12, 0, cache=small_cache)
    model, _ = train_predictor(samples, TrainConfig(epochs=80))
    return model


ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance_line():
    """Record the one-line verdict of an acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
