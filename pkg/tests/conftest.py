import numpy as np
import pytest

from relaynet.model import Cascade, FullDuplex, HalfDuplex, Parallel


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def draw_cascade(rng):
    L = int(rng.integers(1, 6))
    noise = rng.uniform(0.1, 5, L)
    return Cascade(rng.uniform(0, 20), rng.uniform(0, 20), noise)


def draw_parallel(rng):
    L = int(rng.integers(1, 6))
    return Parallel(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(0.1, 5, L),
                    rng.uniform(0.1, 5, L))


def draw_halfduplex(rng):
    L = int(rng.integers(0, 5))
    return HalfDuplex(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(0, 2),
                      rng.uniform(0, 2, L), rng.uniform(0.1, 5, L), rng.uniform(0.1, 5))


def draw_fullduplex(rng):
    L = int(rng.integers(0, 5))
    return FullDuplex(rng.uniform(0, 20), rng.uniform(0, 20), rng.uniform(0, 2),
                      rng.uniform(0, 2, L), rng.uniform(0.1, 5, L), rng.uniform(0.1, 5))


# one summary line per acceptance criterion, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
