import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


def fd_grad(fn, arr, h=1e-5):
    """Central differences of the scalar ``fn()`` w.r.t. ``arr`` (mutated in place and restored)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(fn())
        flat[i] = keep - h
        down = float(fn())
        flat[i] = keep
        gflat[i] = (up - down) / (2 * h)
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_criteria: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary prints them in order."""
    def record(number, passed, detail, gate=True):
        status = "PASS" if passed else ("FAIL" if gate else "WARN")
        line = f"criterion {number}: {status}  {detail}"
        _criteria[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_criteria):
            terminalreporter.write_line(_criteria[n])
