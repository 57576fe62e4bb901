import numpy as np
import pytest

from sinkflow.scenario import reference_scenario
from sinkflow.transport import FlowModel, run_scenario

# Lines "criterion N: PASS/FAIL ..." registered by the acceptance tests.
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def ref64():
    return reference_scenario(64)


@pytest.fixture(scope="session")
def model64(ref64):
    return FlowModel.from_scenario(ref64)


@pytest.fixture(scope="session")
def dom64(model64):
    return model64.domain


@pytest.fixture(scope="session")
def basis64(model64):
    return model64.basis


@pytest.fixture(scope="session")
def rec64(ref64, model64):
    return run_scenario(ref64, 1e-3, model=model64)


@pytest.fixture(scope="session")
def rec64_sl(ref64, model64):
    return run_scenario(ref64, 0.0, model=model64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
