import numpy as np
import pytest
from hypothesis import settings

from metalign.data import SyntheticSpec, generate_synthetic_corpus
from metalign.model import EncoderConfig, ParameterVector  # noqa: F401

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def synth():
    return generate_synthetic_corpus(SyntheticSpec())


@pytest.fixture(scope="session")
def small_synth():
    return generate_synthetic_corpus(SyntheticSpec(concepts=30, questions_per_language=40,
                                                   pairs_per_language_pair=20, seed=3))


@pytest.fixture(scope="session")
def sts_synth():
    spec = SyntheticSpec(concepts=40, languages=("AR", "EN", "ES", "TR"), questions_per_language=30,
                         pairs_per_language_pair=60, seed=11)
    return generate_synthetic_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
