import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gencad import _accel
from gencad.cadlang import CadCommand, CadSequence

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def both_backends():
    """Run the body once per kernel backend and restore the original choice."""
    before = _accel.USE_NUMBA

    def run(fn):
        out = []
        for use in ([True, False] if _accel.HAVE_NUMBA else [False]):
            _accel.set_backend(use)
            out.append(fn())
        _accel.set_backend(before)
        return out
    yield run
    _accel.set_backend(before)


def box_program(w=1.0, h=1.0, depth=1.0):
    """Axis-aligned box ``[0, w] x [0, h] x [0, depth]`` with exact (unquantized) floats."""
    return CadSequence((
        CadCommand.sol(),
        CadCommand.line(w, 0.0), CadCommand.line(w, h), CadCommand.line(0.0, h),
        CadCommand.line(0.0, 0.0),
        CadCommand.extrude(depth),
    ))


def cylinder_program(r=0.5, height=1.0):
    return CadSequence((CadCommand.sol(), CadCommand.circle(0.0, 0.0, r),
                        CadCommand.extrude(height)))


def bracket_program():
    """Plate with a hole, a joined rounded boss and a cut slot."""
    return CadSequence((
        CadCommand.sol(),
        CadCommand.line(0.8, 0.0), CadCommand.line(0.8, 0.6), CadCommand.line(0.0, 0.6),
        CadCommand.line(0.0, 0.0),
        CadCommand.sol(), CadCommand.circle(0.4, 0.3, 0.12),
        CadCommand.extrude(0.2),
        CadCommand.sol(),
        CadCommand.line(0.3, 0.0), CadCommand.arc(0.3, 0.3, math.pi, 1),
        CadCommand.line(0.0, 0.3), CadCommand.line(0.0, 0.0),
        CadCommand.extrude(0.5, theta=math.pi / 2, origin=(0.0, 0.0, 0.0), op=1),
        CadCommand.sol(), CadCommand.circle(0.0, 0.0, 0.1),
        CadCommand.extrude(0.3, 0.3, origin=(0.6, 0.3, 0.0), op=2, two_sided=True),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion, shown in the terminal summary
ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail):
    line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
