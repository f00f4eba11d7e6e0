import numpy as np
import pytest

from bethe_anderson.cavity import McBudget
from bethe_anderson.rng import RngHandle


@pytest.fixture
def small_mc():
    """A budget small enough for unit tests."""
    return McBudget(n_pool=20_000, burn_in=100, n_measure=40, n_batches=10, n_paths=8192, rng=RngHandle(1))


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one verdict line per acceptance criterion."""

    def record(k: int, ok: bool, detail: str) -> None:
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[k] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
