import numpy as np
import pytest

from bevhead.scene import BevGrid, SceneConfig, generate_frames

SMALL_GRID = BevGrid(0.0, 0.0, 0.5, 48, 48)
SMALL_SCENE = SceneConfig(x_range=(0.0, 24.0), y_range=(0.0, 24.0), min_boxes=2, max_boxes=4, n_ground=150)


@pytest.fixture(scope="session")
def small_frames():
    return generate_frames(SMALL_SCENE, seed=4, count=5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
