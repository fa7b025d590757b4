import numpy as np
import pytest

from mimo_otfs.channel import GeometryConfig, PathParams, UserChannel
from mimo_otfs.observation import GridConfig, UlTrainingConfig, build_dictionaries, random_training
from mimo_otfs.otfs import OtfsConfig

TS = 1 / 20e6


@pytest.fixture
def geom16():
    return GeometryConfig.from_carriers(16, 6e9)


@pytest.fixture
def small_otfs():
    return OtfsConfig(64, 32, 8, TS)


@pytest.fixture
def ul_setup(geom16):
    """16-antenna array, 36-angle x 8-delay grid, 24-sample training."""
    grid = GridConfig(36, 8)
    training = UlTrainingConfig(random_training(24, rng=np.random.default_rng(1)), cp_len=8)
    A, B = build_dictionaries(grid, geom16)
    return grid, training, A, B


def make_user(spec, index=0):
    """``spec`` rows are (delay taps, doppler Hz, angle deg, gain)."""
    return UserChannel(tuple(PathParams(t * TS, float(v), float(np.deg2rad(a)), complex(g))
                             for t, v, a, g in spec), index)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
