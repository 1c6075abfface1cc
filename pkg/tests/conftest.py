import os

os.environ.setdefault("NUMBA_NUM_THREADS", "1")

import numpy as np
import pytest

from specsplat.pbr import build_brdf_lut


@pytest.fixture(scope="session")
def lut():
    return build_brdf_lut(512, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(name: str, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
