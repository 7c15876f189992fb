import numpy as np
import pytest

from emr_attrib.model import ModelConfig, init_model

ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"))
    print(ACCEPTANCE_LINES[-1][1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def scaled_model(n_inputs, hidden=(4, 5), seed=0, scale=1.0):
    """Random model; ``scale`` > 1 gives outputs that move visibly with the input."""
    p = init_model(ModelConfig(n_inputs, hidden, seed=seed))
    for a in p.arrays():
        a *= scale
    return p


@pytest.fixture
def small_model():
    return scaled_model(5, seed=1, scale=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sparse_input(rng, n, t, density=0.6):
    x = rng.normal(size=(n, t))
    x[rng.random((n, t)) > density] = 0.0
    return x
