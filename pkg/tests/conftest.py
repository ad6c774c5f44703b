import numpy as np
import pytest

from admmqp.core import validate_problem


@pytest.fixture
def simplex_problem():
    # Q = I, p = -1, sum z = 1, box [0, 1]; optimum at equal weights
    return validate_problem(np.eye(2), [-1.0, -1.0], [[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0])


@pytest.fixture
def separable_problem():
    return validate_problem(np.eye(2), [0.3, -0.7], None, None, [0.0, 0.0], [1.0, 1.0])


# -- acceptance report --------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "forward correctness vs oracle",
    2: "KKT residuals at convergence",
    3: "fixed-point identity at tight tolerance",
    4: "fixed-point gradients vs finite differences",
    5: "engine equivalence",
    6: "backward system sizes",
    7: "fixed-point vs KKT backward timing at d_z=250",
    8: "backward time vs forward tolerance at d_z=100",
    9: "learn-p training descent and OLS dominance",
    10: "portfolio objectives vs OLS plug-in",
    11: "Sharpe loss scale invariance",
    12: "dual recovery complementarity",
}
ACCEPTANCE_LINES = {}


@pytest.fixture
def acceptance():
    """Record one acceptance criterion and print its pass/fail line."""

    def record(n, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {ACCEPTANCE_TITLES[n]}: {detail}"
        ACCEPTANCE_LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not any("test_acceptance" in item for item in terminalreporter.config.args) and not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_TITLES):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n, f"[ -- ] {n:2d}. {ACCEPTANCE_TITLES[n]}: not run (deselected or errored)"))
