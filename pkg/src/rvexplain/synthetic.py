"""Synthetic conversation threads for tests and offline demos."""

from __future__ import annotations

import numpy as np

from .ingest import LABELS, EmbeddedThread, build_thread

STANCES = ("support", "deny", "query", "comment")

_WORDS = {
    "true": ["confirmed", "true", "believe", "official"],
    "false": ["false", "fake", "deny", "hoax"],
    "unverified": ["unverified", "doubt", "source?", "wondering"],
}


def random_tree(n_posts: int, rng: np.random.Generator) -> list[int | None]:
    """Parent index per post; post 0 is the root."""
    return [None] + [int(rng.integers(0, i)) for i in range(1, n_posts)]


def separable_threads(
    n_threads: int = 30,
    embed_dim: int = 8,
    min_posts: int = 3,
    max_posts: int = 8,
    noise: float = 0.5,
    events: tuple[str, ...] = ("ev_a", "ev_b", "ev_c"),
    seed: int = 0,
) -> list[EmbeddedThread]:
    """Threads whose label is the argmax of a fixed linear map of the mean embedding."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(len(LABELS), embed_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    threads = []
    for t in range(n_threads):
        c = t % len(LABELS)
        l = int(rng.integers(min_posts, max_posts + 1))
        emb = protos[c] * 2.0 + noise * rng.normal(size=(l, embed_dim))
        label = LABELS[int(np.argmax(protos @ emb.mean(axis=0)))]
        parents = random_tree(l, rng)
        words = _WORDS[label.value]
        raw = [{
            "id": f"t{t}p{i}",
            "text": f"post {i} of thread {t} {words[i % len(words)]}" if i else f"claim number {t}",
            "parent_id": None if parents[i] is None else f"t{t}p{parents[i]}",
            "timestamp": 1000 * t + i,
        } for i in range(l)]
        thread = build_thread(f"t{t}", events[t % len(events)], raw, f"t{t}p0", label)
        thread.embeddings = emb
        thread.stance = np.eye(len(STANCES))[rng.integers(0, len(STANCES), size=l)]
        threads.append(thread)
    return threads
