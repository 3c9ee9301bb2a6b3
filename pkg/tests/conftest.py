import pytest

# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    def record(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  [{number:>2}] {title}: {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
