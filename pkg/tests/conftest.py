import numpy as np
import pytest

from mmvarnet.fields import FieldStack, GridSpec, ObsModality, ObsSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_stack(grid, rng, scale=1.0):
    return FieldStack(grid, scale * rng.standard_normal(grid.shape))


def random_obs(grid, rng, frac=0.4):
    truth = rng.standard_normal(grid.shape)
    mask = FieldStack(grid, (rng.random(grid.shape) < frac).astype(np.float32))
    return ObsSet((
        ObsModality.masked(1, FieldStack(grid, truth + 0.1 * rng.standard_normal(grid.shape)), mask),
        ObsModality.dense(2, FieldStack(grid, truth + 0.3 * rng.standard_normal(grid.shape))),
        ObsModality.dense(3, FieldStack(grid, rng.standard_normal(grid.shape))),
    ))


@pytest.fixture
def small_grid():
    return GridSpec(3, 8, 8, 0.05, 1.0)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion, in criterion order."""
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines.items()):
        terminalreporter.write_line(line)
