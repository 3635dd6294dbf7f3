import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


import pytest  # noqa: E402

VERDICTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def verdict(request):
    def record(ok: bool, detail: str) -> None:
        name = request.node.name.removeprefix("test_")
        VERDICTS.append((name, ok, detail))
        print(f"{name}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in VERDICTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
