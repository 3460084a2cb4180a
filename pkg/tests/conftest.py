import pytest

from skeld.grid import Grid
from skeld.nonlinearity import NonlinearitySpec


@pytest.fixture
def grid64():
    return Grid(1, 64)


@pytest.fixture(params=[1.0, 2.0, 3.0], ids=lambda m: f"m{m:g}")
def power_spec(request):
    return NonlinearitySpec.power(request.param)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
