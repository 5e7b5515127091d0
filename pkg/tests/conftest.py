import numpy as np
import pytest
import torch

from metaspeaker.synthetic import SyntheticSpec, generate

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """6 speakers x 4 short utterances of synthetic audio, plus its manifest."""
    root = tmp_path_factory.mktemp("toy_corpus")
    spec = SyntheticSpec(n_speakers=6, utterances_per_speaker=4, duration_range=(1.2, 2.5), noise_level=0.5, seed=3)
    manifest = generate(spec, root)
    return root, manifest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains models for minutes; deselect with -m 'not slow'")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
