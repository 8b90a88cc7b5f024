import numpy as np
import pytest

from styledrive import maps, scene


@pytest.fixture
def straight_road():
    """Two 100 m lanes along +x (y = 0 and y = 3.5) cut into 50 m pieces."""
    return scene.RoadMap.from_dict(maps.corridor(length=100.0, lanes=2))


def vehicle(id, x, y, h=0.0, v=0.0, lane=None, extent=(4.5, 2.0)):
    return scene.make_object(id, "vehicle", scene.Pose.make(x, y, h), v, extent, lane)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
