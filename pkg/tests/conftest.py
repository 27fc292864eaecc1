import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

LAMBDA_PLUS = (3 + np.sqrt(5)) / 2
LOG_LAMBDA_PLUS = float(np.log(LAMBDA_PLUS))
UNSTABLE = np.array([1.0, (np.sqrt(5) - 1) / 2]) / np.linalg.norm([1.0, (np.sqrt(5) - 1) / 2])
STABLE = np.array([-UNSTABLE[1], UNSTABLE[0]])


@pytest.fixture(scope="session")
def cat_setup():
    from nuhyp.bundle import estimate_splitting
    from nuhyp.phase import Point, cat2, make_orbit

    system = cat2()
    orbit = make_orbit(system, Point(np.array([0.1, 0.2]), system.space), 300, 100)
    split = estimate_splitting(system, orbit, (1, 1))
    return system, orbit, split


@pytest.fixture(scope="session")
def diag_setup():
    from nuhyp.bundle import estimate_splitting
    from nuhyp.phase import diag3, make_orbit, zero_point

    system = diag3()
    orbit = make_orbit(system, zero_point(system), 200, 100)
    split = estimate_splitting(system, orbit, (1, 1, 1))
    return system, orbit, split


# acceptance verdicts: criterion -> list of (part, passed); printed once per criterion
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for _, p in parts)
        detail = "; ".join(f"{name}: {'ok' if p else 'failed'}" for name, p in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
