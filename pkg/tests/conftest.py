import numpy as np
import pytest

from stepedit import factsynth as fs
from stepedit import toylm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    return fs.generate_corpus(fs.CorpusConfig(n=60, seed=3))


@pytest.fixture(scope="session")
def pretrained(small_corpus):
    """Base model fit to the small corpus; tests must copy before mutating."""
    model = toylm.ToyModel.init(toylm.ModelConfig(), 3)
    report = toylm.fit(model, fs.pretrain_corpus(small_corpus), steps=2000, lr=1e-2)
    assert report.accuracy == 1.0
    return model


@pytest.fixture
def model(pretrained):
    return pretrained.copy()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
