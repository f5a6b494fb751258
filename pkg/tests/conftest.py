import pytest

_CRITERION_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion.

    Lines are echoed immediately (visible under -s or on failure) and again
    in the terminal summary so every run prints the full checklist.
    """

    def _report(num: int, ok: bool, text: str):
        line = "[criterion %02d] %s: %s" % (num, "PASS" if ok else "FAIL",
                                            text)
        _CRITERION_LINES.append((num, line))
        print(line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for _, line in sorted(_CRITERION_LINES):
        terminalreporter.write_line(line)
