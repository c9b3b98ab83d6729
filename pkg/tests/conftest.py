import pytest

_CRITERIA: dict[int, tuple[bool, str, str]] = {}


class CriterionReport:
    """Records one PASS/FAIL line per acceptance criterion."""

    def __call__(self, number: int, title: str, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(ok), title, detail)
        print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}")


@pytest.fixture(scope="session")
def criterion():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
