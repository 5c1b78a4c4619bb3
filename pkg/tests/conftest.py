import sys
from pathlib import Path

import pytest

from gimlab import synthgen as sg

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def repaint_dataset(tmp_path_factory):
    """Family (a) only: 150 train / 100 test pairs at 64x64."""
    cfg = sg.DatagenConfig(train_per_family=150, test_per_family=100, cross_dist_test=0,
                           families=("repaint-noise",), seed=11)
    return sg.build_dataset(cfg, tmp_path_factory.mktemp("repaint"))


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    cfg = sg.DatagenConfig(train_per_family=6, test_per_family=4, cross_dist_test=4, seed=5)
    return sg.build_dataset(cfg, tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
