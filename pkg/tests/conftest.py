import time

import numpy as np
import pytest

from cpmtp import corpus as corp
from cpmtp import cp_distribution as cpd
from cpmtp import training as tr

# Order-1 chain over 32 tokens in 4 groups. The next token's group depends on
# the current group, so two future tokens are correlated through the hidden
# group of the first one and a rank-1 head cannot represent the joint.
MAIN_CHAIN = dict(vocab=32, clusters=4, seed=0, lead=0.3, between=2.0)
MAIN_LENGTH = 200_000
MAIN_STEPS = 1500
RANKS = (1, 2, 4, 8)

ACCEPTANCE_LINES = []


def random_dist(rng, n, r, V, scale=2.0):
    return cpd.from_logits(rng.normal(0, scale, r), rng.normal(0, scale, (n, r, V)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def main_chain():
    return corp.clustered_markov(**MAIN_CHAIN)


@pytest.fixture(scope="session")
def main_corpus(main_chain):
    return corp.generate_markov(main_chain, MAIN_LENGTH, seed=0)


@pytest.fixture(scope="session")
def rank_models(main_corpus):
    """Scratch models of every rank in RANKS trained on the main corpus."""
    out = {}
    t0 = time.perf_counter()
    for r in RANKS:
        cfg = tr.TrainConfig(rank=r, horizon=2, steps=MAIN_STEPS, learning_rate=1e-2, seed=0)
        model, metrics = tr.train(cfg, main_corpus)
        out[r] = {"model": model, "metrics": metrics, "eval": tr.evaluate(model, main_corpus)}
    out["seconds"] = time.perf_counter() - t0
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
