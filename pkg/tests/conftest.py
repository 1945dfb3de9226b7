import numpy as np
import pytest

from curlip.encoder import EncoderConfig, PretrainConfig, pretrain
from curlip.synthetic import make_corpus
from curlip.tokenizer import train_vocab

VOCAB_SIZE = 300


@pytest.fixture(scope="session")
def toy_corpus():
    return make_corpus(500, seed=11)


@pytest.fixture(scope="session")
def toy_vocab(toy_corpus):
    return train_vocab([r.raw for r in toy_corpus], VOCAB_SIZE, seed=0)


@pytest.fixture(scope="session")
def desk_encoder_cfg():
    return EncoderConfig.desk(VOCAB_SIZE)


@pytest.fixture(scope="session")
def pretrain_200(toy_corpus, toy_vocab, desk_encoder_cfg):
    """200 pretraining steps on the 500-URL toy corpus (shared by several tests)."""
    pcfg = PretrainConfig(epochs=100, max_steps=200)
    return pretrain([r.raw for r in toy_corpus], toy_vocab, desk_encoder_cfg, pcfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
