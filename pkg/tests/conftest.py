import math

import numpy as np
import pytest
from hypothesis import settings

from evokansa.surfaces import ParametricSurface

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def sphere(radius: str = "1") -> ParametricSurface:
    r = radius
    return ParametricSurface.from_strings(
        [f"({r})*sin(th)*cos(ph)", f"({r})*sin(th)*sin(ph)", f"({r})*cos(th)"],
        ["th", "ph"], [(0, math.pi), (0, 2 * math.pi)], [False, True])


def circle(radius: str = "1") -> ParametricSurface:
    return ParametricSurface.from_strings(
        [f"({radius})*cos(p)", f"({radius})*sin(p)"], ["p"], [(0, 2 * math.pi)], [True])


def example1_curve() -> ParametricSurface:
    return ParametricSurface.from_strings(
        ["sqrt(1 + 0.25*sin(2*pi*t))*cos(p)", "sin(p)"], ["p"], [(0, 2 * math.pi)], [True])


def example2_surface() -> ParametricSurface:
    return ParametricSurface.from_strings(
        ["(1 + 0.25*sin(t))*sin(th)*cos(ph)", "sin(th)*sin(ph)", "cos(th)"],
        ["th", "ph"], [(0, math.pi), (0, 2 * math.pi)], [False, True])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
