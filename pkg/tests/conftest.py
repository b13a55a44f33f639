import os
import sys
from pathlib import Path

# must land before numpy's first import; see debiasrank.__init__
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

sys.path.insert(0, str(Path(__file__).parent))

_acceptance_results: list[tuple[str, str]] = []


def record_acceptance(criterion: str, status: str) -> None:
    _acceptance_results.append((criterion, status))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status in _acceptance_results:
        terminalreporter.write_line(f"{status}: {criterion}")
