import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

# acceptance criterion results collected for the end-of-run summary
_ACCEPTANCE_RESULTS = {}


def record_acceptance(number: int, description: str, passed: bool = True):
    _ACCEPTANCE_RESULTS[number] = (description, passed)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    yield


def pytest_runtest_makereport(item, call):
    # mark failed acceptance tests so the summary shows FAIL
    if call.when == "call" and call.excinfo is not None:
        marker = getattr(item, "_acceptance_info", None)
        if marker is not None:
            number, description = marker
            _ACCEPTANCE_RESULTS[number] = (description, False)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for number in sorted(_ACCEPTANCE_RESULTS):
        description, passed = _ACCEPTANCE_RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"  criterion {number:2d} [{status}] {description}")
