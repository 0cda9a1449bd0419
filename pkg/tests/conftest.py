import os

import numpy as np
import pytest

os.environ.setdefault("ZONEBENCH_DETERMINISTIC", "1")

from zonebench.ingest import synth_generate  # noqa: E402

ACCEPTANCE_RESULTS = []


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """4 patients x 5 slices, seed 7."""
    root = tmp_path_factory.mktemp("synth")
    synth_generate(4, 5, 7, root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance():
    def record(number, title, passed, detail=""):
        ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        mark = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{mark}] {number}. {title}" + (f" ({detail})" if detail else ""))
