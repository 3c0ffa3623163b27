import re

import numpy as np
import pytest

from becphase import lattice


@pytest.fixture(scope="session")
def grid257():
    return lattice.build_grid(-8.0, 8.0, 257)


@pytest.fixture(scope="session")
def harmonic6(grid257):
    v = 0.5 * grid257.x**2
    basis = lattice.solve_modes(grid257, v, 6)
    return basis, v


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register their verdicts here; the summary hook prints
# one line per criterion at the end of the session
ACCEPTANCE = {}
ACCEPTANCE_TITLES = {
    1: "derivation anchors",
    2: "noise statistics",
    3: "diffusion factorization",
    4: "linear exactness",
    5: "ordering correction",
    6: "two-mode Josephson oracle",
    7: "hybrid small-instance oracle",
    8: "single-particle interferometer",
    9: "reproducibility",
    10: "statistical scaling",
}


def _record(k, ok, detail=""):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {k}: {ACCEPTANCE_TITLES[k]}  {detail}")
    return ok


@pytest.fixture
def record_criterion():
    return _record


def pytest_terminal_summary(terminalreporter):
    seen = set()
    for rep in terminalreporter.stats.get("passed", []) + terminalreporter.stats.get("failed", []):
        m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
        if m:
            seen.add(int(m.group(1)))
    if not seen:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(seen):
        ok, detail = ACCEPTANCE.get(k, (False, "(errored before a verdict)"))
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] criterion {k}: {ACCEPTANCE_TITLES[k]}  {detail}")
