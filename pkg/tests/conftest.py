import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Append ``(criterion, passed, detail)``; lines are printed in the terminal summary."""
    lines = request.config.stash[_LINES]

    def record(name: str, passed: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        print(lines[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
