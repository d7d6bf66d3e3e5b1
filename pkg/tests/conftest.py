import numpy as np
import pytest

from pragcomm.mdp import HorizonConfig, build_counterexample, random_mdp


def instance_set():
    """The 20 seeded random instances shared by the ordering checks."""
    return [random_mdp(seed, 2 + seed % 3, 2, 0.9) for seed in range(20)]


@pytest.fixture
def counterexample():
    return build_counterexample(0.9)


@pytest.fixture
def small_mdp():
    return random_mdp(3, 3, 2, 0.9)


@pytest.fixture
def cfg3():
    return HorizonConfig(t_max=3, epsilon=1e-9)


def chain(rows):
    return np.array(rows, dtype=float)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
