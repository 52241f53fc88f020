import pytest

_CRITERIA = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Lines are echoed as soon as they are known and repeated in a summary
    section at the end of the run.
    """
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(num, passed, detail):
        line = f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[num] = line
        if tr is not None:
            tr.write_line("")
            tr.write_line(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[num])
