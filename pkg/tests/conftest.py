import numpy as np
import pytest
import torch

from spkadapt.corpus import CorpusSpec, generate_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two speakers, six short utterances each."""
    spec = CorpusSpec(n_speakers=2, utterances_per_speaker=6, seed=5,
                      duration_distribution=(("less_5", 1.0),))
    out = tmp_path_factory.mktemp("small_corpus")
    return spec, out, generate_corpus(spec, out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def corpus400(tmp_path_factory):
    """8 speakers x 50 utterances with the reference duration mix."""
    spec = CorpusSpec(n_speakers=8, utterances_per_speaker=50, seed=7,
                      duration_distribution=(("less_5", 0.25), ("5_15", 0.70), ("15_above", 0.05)))
    out = tmp_path_factory.mktemp("corpus400")
    return spec, out, generate_corpus(spec, out)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
