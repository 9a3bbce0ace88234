import os

# every SVM trained in this session (and in CLI subprocesses) is KKT-audited
os.environ["PTSVM_KKT_AUDIT"] = "1"

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from ptsvm import load_ieee14  # noqa: E402
from ptsvm.scenario import generate_dataset  # noqa: E402

# criterion number -> result line, printed in order at the end of the run
ACCEPTANCE_LINES = {}


def pytest_collection_modifyitems(config, items):
    # acceptance checks run last so the KKT audit count covers the whole suite
    items.sort(key=lambda it: "test_acceptance.py" in it.nodeid)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def ieee14():
    return load_ieee14()


@pytest.fixture(scope="session")
def desk_ds(ieee14):
    """400-row dataset (25 samples per line) for desk-scale checks."""
    return generate_dataset(ieee14, 25, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
