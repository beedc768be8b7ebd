from importlib import resources

import numpy as np
import pytest

from gridinstanton import feasibility
from gridinstanton.grid import load_grid

DATA = resources.files("gridinstanton") / "data"

BALANCE_TOL = 1e-8
DC_TOL = 1e-8


class ConservationLog:
    def __init__(self):
        self.checked = 0
        self.worst_balance = 0.0
        self.worst_dc = 0.0

    def __call__(self, grid, res):
        bal, dc = feasibility.residuals(grid, res)
        self.checked += 1
        self.worst_balance = max(self.worst_balance, bal)
        self.worst_dc = max(self.worst_dc, dc)
        assert bal <= BALANCE_TOL, f"power balance residual {bal:.3e} at demand {res.demand}"
        assert dc <= DC_TOL, f"phase/flow coupling residual {dc:.3e} at demand {res.demand}"
        assert np.all(res.shed >= -1e-8) and np.all(res.shed <= res.demand + 1e-8)


@pytest.fixture(autouse=True)
def conservation():
    """Check power balance and phase/flow coupling on every LP solve in every test."""
    hook = ConservationLog()
    feasibility._result_hooks.append(hook)
    yield hook
    feasibility._result_hooks.remove(hook)


def data_path(name):
    return str(DATA / name)


@pytest.fixture(scope="session")
def two_bus():
    return load_grid(data_path("two_bus.json"))


@pytest.fixture(scope="session")
def toy():
    return load_grid(data_path("toy_one_load.json"))


@pytest.fixture(scope="session")
def triangle():
    return load_grid(data_path("triangle.json"))


@pytest.fixture(scope="session")
def rts96():
    return load_grid(data_path("case_rts96.m"))


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list = []


def record_criterion(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
