import pytest

# (criterion, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, str, bool, str]] = []


@pytest.fixture
def record():
    def _record(criterion: str, title: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE.append((criterion, title, passed, detail))
        status = "PASS" if passed else "FAIL"
        print(f"[{status}] criterion {criterion}: {title}" + (f" ({detail})" if detail else ""))

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {criterion}: {title}" + (f" ({detail})" if detail else ""))
