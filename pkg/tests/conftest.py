import sys
import warnings

import numpy as np
import pytest

from avn.lang import CorpusConfig, build_corpus
from avn.navigator import NavConfig, train_navigator
from avn.world import World

TINY = CorpusConfig(n_train_worlds=4, n_unseen_worlds=2, train_episodes=40, val_seen_episodes=30,
                    val_unseen_episodes=20)


@pytest.fixture(scope="session")
def trained():
    """Default-size corpus and navigator for seed 0 (shared by the model tests)."""
    corpus = build_corpus(0)
    nav = train_navigator(corpus, NavConfig(seed=0))
    return corpus, nav


@pytest.fixture(scope="session")
def tiny():
    corpus = build_corpus(3, TINY)
    nav = train_navigator(corpus, NavConfig(seed=3, epochs=2))
    return corpus, nav


@pytest.fixture(scope="session")
def gate_samples(trained):
    from avn.iv import collect_samples
    corpus, nav = trained
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return collect_samples(nav, corpus, corpus.splits["val_seen"])


def line_world(n=3, landmarks=None):
    pos = np.array([[float(i), 0.0] for i in range(n)])
    adj = [dict() for _ in range(n)]
    for i in range(n - 1):
        adj[i][i + 1] = 1.0
        adj[i + 1][i] = 1.0
    lm = np.zeros(n, dtype=np.int64) if landmarks is None else np.asarray(landmarks)
    return World(pos, lm, np.zeros((n, 32)), adj, world_id="line")


def star_world():
    """Centre 0 with two leaves placed symmetrically; all landmarks equal."""
    pos = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
    adj = [{1: 2 ** 0.5, 2: 2 ** 0.5}, {0: 2 ** 0.5}, {0: 2 ** 0.5}]
    return World(pos, np.zeros(3, dtype=np.int64), np.zeros((3, 32)), adj, world_id="star")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
