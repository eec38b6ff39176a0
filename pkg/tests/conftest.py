import pytest
from hypothesis import settings

# fixed example sequences so property suites are reproducible run to run
settings.register_profile("deterministic", derandomize=True)
settings.load_profile("deterministic")

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one ``criterion N: PASS|FAIL`` line; echoed again in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
