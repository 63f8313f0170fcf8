import re
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> one-line verdict, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


class Criterion:
    def __init__(self, number: int):
        self.number = number
        self.line: str | None = None

    def report(self, title: str, passed: bool, detail: str) -> bool:
        self.line = f"[{'PASS' if passed else 'FAIL'}] criterion {self.number:2d} {title}: {detail}"
        ACCEPTANCE[self.number] = self.line
        print(self.line)
        return passed


@pytest.fixture
def criterion(request):
    m = re.match(r"test_criterion_(\d+)", request.node.name)
    rec = Criterion(int(m.group(1)))
    yield rec
    if rec.line is None:
        ACCEPTANCE[rec.number] = f"[FAIL] criterion {rec.number:2d}: raised before reporting"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
