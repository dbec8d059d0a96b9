import pytest
from hypothesis import HealthCheck, settings

from iovsim.crypto import DeterministicProvider

from support import ACCEPTANCE, Net

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{num:2d}] {name}: {detail}")


@pytest.fixture
def crypto():
    return DeterministicProvider(7)


@pytest.fixture
def net(crypto):
    return Net.create(crypto)
