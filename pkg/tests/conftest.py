import math

import numpy as np
import pytest

from qtmq import wronskian as W
from qtmq.params import ModelParams

BASELINE = dict(gamma=math.pi / 5, beta=1.0, h=0.4)
STARTS = {2: 64, 4: 256, 6: 1024, 8: 4096}

_cache = {}


def baseline(N, **changes):
    return ModelParams(N=N, **{**BASELINE, **changes})


def special_solutions(N, seed=0, **changes):
    """Deduplicated reduced-system solutions at baseline parameters (cached per session)."""
    key = (N, seed, tuple(sorted(changes.items())))
    if key not in _cache:
        params = baseline(N, **changes)
        cfg = W.SolverConfig(n_starts=STARTS.get(N, 4096), seed=seed)
        _cache[key] = W.solve_multistart(W.assemble_reduced_system(params), cfg)
    return _cache[key]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def record(criterion, ok, detail):
    """Print and keep one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
