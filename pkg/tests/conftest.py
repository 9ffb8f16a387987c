import numpy as np
import pytest

from maskvar.corpus import SyntheticGrammar, TokenSequence, generate_corpus
from maskvar.encoder import EncoderConfig, EncoderParams
from maskvar.mapnet import MapNetParams


def toy_config(vocab_size: int, **kw) -> EncoderConfig:
    return EncoderConfig(vocab_size=vocab_size, dropout=0.0, **kw)


@pytest.fixture(scope="session")
def grammar():
    return SyntheticGrammar()


@pytest.fixture(scope="session")
def vocab_size(grammar):
    return len(grammar.vocabulary())


@pytest.fixture(scope="session")
def lab_corpus():
    """Three length-6 sentences from the default grammar (the enumeration fixture)."""
    g = SyntheticGrammar(min_len=6, max_len=6)
    return generate_corpus(g, 3, np.random.default_rng(2024))


@pytest.fixture(scope="session")
def toy_params(vocab_size):
    return EncoderParams.init(toy_config(vocab_size), np.random.default_rng(7))


@pytest.fixture(scope="session")
def toy_mapnet(toy_params):
    return MapNetParams.for_encoder(toy_params, np.random.default_rng(8))


@pytest.fixture(scope="session")
def small_corpus(grammar):
    return generate_corpus(grammar, 64, np.random.default_rng(11))


@pytest.fixture
def sentence():
    return TokenSequence(np.array([5, 9, 23, 40, 7, 100, 3, 60]))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
