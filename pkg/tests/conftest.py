import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("xtkd", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("xtkd")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, repeated in the terminal summary.
_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance(capsys):
    def report(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title}  [{detail}]"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
