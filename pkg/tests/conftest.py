import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts.RESULTS):
            terminalreporter.write_line(verdicts.line(n))
