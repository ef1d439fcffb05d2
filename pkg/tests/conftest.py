import numpy as np
import pytest

from uilab.model import ArchSpec, Sample, init_params

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report():
    """``report(n, ok, detail)`` records one line for the end-of-run summary."""
    def report(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


@pytest.fixture
def tiny_arch():
    return ArchSpec((3, 3, 1), (5, 4), 3, "tanh")


@pytest.fixture
def tiny_theta(tiny_arch):
    return init_params(tiny_arch, 3)


@pytest.fixture
def tiny_sample(tiny_arch):
    rng = np.random.default_rng(11)
    return Sample(rng.uniform(0.1, 0.9, tiny_arch.input_dims), 1)
