import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


class CriterionLog:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def record(self, number: int, ok: bool | None, detail: str) -> None:
        status = "PASS" if ok else ("WARN" if ok is None else "FAIL")
        _RESULTS[number] = (status, detail)
        print(f"criterion {number}: {status} {detail}")


@pytest.fixture(scope="session")
def criteria():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
