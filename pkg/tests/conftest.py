import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import verdicts  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False,
                     help="run full-scale acceptance checks (also RAPPOR_FULL=1)")


@pytest.fixture(scope="session")
def full_scale(request):
    return request.config.getoption("--full") or os.environ.get("RAPPOR_FULL") == "1"


def pytest_terminal_summary(terminalreporter):
    if not verdicts.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(verdicts.RESULTS, key=lambda r: (r[0], r[1])):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {name}: {detail}")
