import numpy as np
import pytest

from hrpvt import tensor as T
from hrpvt.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _restore_conv_impl():
    yield
    T.set_conv_impl("gemm")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(dtype="float64", strategy="vanilla")


_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict; the line is repeated in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
