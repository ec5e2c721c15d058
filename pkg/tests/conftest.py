import pytest

from borderwatch.harness import scaled_template
from borderwatch.simulator import run_simulation


@pytest.fixture(scope="session")
def small_config():
    # 120 routers, 400 servers, 36 virtual seconds.
    return scaled_template(0.02, seed=3)


@pytest.fixture(scope="session")
def small_trace(small_config):
    return run_simulation(small_config)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":").split("-")[0])):
            terminalreporter.write_line(line)
