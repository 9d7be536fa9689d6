from __future__ import annotations

import numpy as np
import pytest

from rvexplain.ingest import VeracityLabel, build_thread
from rvexplain.synthetic import separable_threads
from rvexplain.verifier import ModelConfig, ModelParams, train

# test-scale architecture; the fixture learning rate is larger than the ModelConfig default
FIXTURE_CONFIG = dict(embed_dim=8, stance_dim=4, hidden_branch=16, hidden_stance=4,
                      attention_heads=2, lr=1e-3, epochs=300, batch_size=10, seed=0)


@pytest.fixture(scope="session")
def separable():
    return separable_threads(n_threads=30, embed_dim=8, seed=0)


@pytest.fixture(scope="session")
def trained(separable):
    """Model trained on the 30-thread separable fixture (shared by many tests)."""
    return train(separable, ModelConfig(**FIXTURE_CONFIG))


@pytest.fixture(scope="session")
def small_model():
    cfg = ModelConfig(embed_dim=6, stance_dim=4, hidden_branch=8, hidden_stance=4,
                      attention_heads=2, seed=3)
    return ModelParams.init(cfg)


def make_thread(n_posts=5, embed_dim=6, stance_dim=4, seed=0, parents=None, label="true",
                thread_id="t", event="ev"):
    rng = np.random.default_rng(seed)
    if parents is None:
        parents = [None] + [int(rng.integers(0, i)) for i in range(1, n_posts)]
    raw = [{"id": f"p{i}", "text": f"post {i}", "timestamp": i,
            "parent_id": None if parents[i] is None else f"p{parents[i]}"} for i in range(n_posts)]
    t = build_thread(thread_id, event, raw, "p0", VeracityLabel(label) if label else None)
    t.embeddings = rng.normal(size=(n_posts, embed_dim))
    t.stance = np.eye(stance_dim)[rng.integers(0, stance_dim, size=n_posts)]
    return t


# lines emitted by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
