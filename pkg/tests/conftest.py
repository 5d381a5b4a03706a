import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from deskflow import tensor as T  # noqa: E402


@pytest.fixture(autouse=True)
def debug_checks():
    prev = T.set_debug(True)
    yield
    T.set_debug(prev)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
