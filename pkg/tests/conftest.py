import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture
def criterion(request, capsys):
    """Record one acceptance line; all of them are repeated in the terminal summary."""
    lines = request.config.stash[CRITERIA]

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        lines[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[CRITERIA]
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
