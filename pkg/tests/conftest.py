import numpy as np
import pytest

from ufafuse import datasetgen, synthetic

# lines appended by test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus(tmp_path):
    """Four 32x32 synthetic scenes with labels; returns (src_dir, label_dir)."""
    return synthetic.write_corpus(tmp_path / "src", tmp_path / "lab", 4, seed=5, size=32)


@pytest.fixture
def dataset(tmp_path, corpus):
    """Generated triplets for the fixture corpus; returns the manifest entries."""
    src, lab = corpus
    return datasetgen.generate(src, lab, tmp_path / "data", seed=2)
