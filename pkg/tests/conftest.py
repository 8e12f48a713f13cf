import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from convmg.grid import build_hierarchy  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(scope="session")
def hier4():
    return build_hierarchy(5, 4)


@pytest.fixture(scope="session")
def hier3():
    return build_hierarchy(5, 3)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one acceptance line: ``acceptance(number, title, passed, detail, elapsed, limit)``."""
    log = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, passed, detail, elapsed, limit):
        passed = bool(passed and elapsed <= limit)
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail} | {elapsed:.1f}s (limit {limit:.0f}s)"
        log.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
