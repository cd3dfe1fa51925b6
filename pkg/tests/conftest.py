import pytest

_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record and print a one-line PASS/FAIL for an acceptance criterion."""

    def record(ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
