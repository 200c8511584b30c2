import pytest

LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[LINES] = []


@pytest.fixture
def verdict(request, capsys):
    """Print and remember one PASS/FAIL line; returns the boolean so tests can assert it."""

    def emit(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[LINES].append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
