import pytest
from hypothesis import settings

settings.register_profile("shflab", deadline=None, max_examples=40)
settings.load_profile("shflab")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running numerical check")


ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
