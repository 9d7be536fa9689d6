"""Post importance: Integrated Gradients, Shapley values, and ranked subsets.

A post's importance is the sum of the attributions of its input features.
The attributed model is anything mapping ``(embeddings, stance)`` tensors to
a ``1 x C`` logit row; :class:`~rvexplain.verifier.ModelParams` is adapted
automatically using the thread's reply graph.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence, Union

import numpy as np

from . import diffcore as dc
from .ingest import LABELS, EmbeddedThread, VeracityLabel

ModelFn = Callable[[dc.Tensor, dc.Tensor], dc.Tensor]

IG = "IG"
SV = "SV"
MAX_EXACT_POSTS = 12
CACHE_VERSION = 1


class AttributionError(ValueError):
    pass


def _model_fn(model, thread: EmbeddedThread) -> ModelFn:
    from .verifier import ModelParams, build_graphs, model_function

    if isinstance(model, ModelParams):
        return model_function(model, build_graphs(thread))
    if callable(model):
        return model
    raise AttributionError(f"cannot attribute a {type(model).__name__}")


def _features(thread: EmbeddedThread) -> tuple[np.ndarray, np.ndarray]:
    if not thread.has_features:
        raise AttributionError(f"thread {thread.thread_id} has no features attached")
    return thread.embeddings, thread.stance


def _logits(fn: ModelFn, emb: np.ndarray, stance: np.ndarray) -> np.ndarray:
    return fn(dc.const(emb), dc.const(stance)).value[0]


def ranking_of(scores: np.ndarray) -> list[int]:
    """Indices by score descending, ties by index ascending."""
    idx = np.arange(len(scores))
    return [int(i) for i in np.lexsort((idx, -np.asarray(scores)))]


@dataclass
class AttributionResult:
    method: str
    post_scores: np.ndarray
    target_class: VeracityLabel
    per_feature: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    thread_id: str | None = None
    post_ids: list[str] | None = None

    @property
    def ranking(self) -> list[int]:
        return ranking_of(self.post_scores)

    @property
    def important(self) -> list[int]:
        return important_set(self)

    def to_dict(self, include_features: bool = False) -> dict:
        d = {
            "format_version": CACHE_VERSION,
            "method": self.method,
            "thread_id": self.thread_id,
            "post_ids": self.post_ids,
            "post_scores": self.post_scores.tolist(),
            "ranking": self.ranking,
            "important_set": self.important,
            "target_class": self.target_class.value,
            "meta": self.meta,
        }
        if include_features and self.per_feature is not None:
            d["per_feature"] = self.per_feature.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionResult":
        if d.get("format_version") != CACHE_VERSION:
            raise AttributionError(f"unsupported attribution cache version {d.get('format_version')}")
        pf = d.get("per_feature")
        return cls(
            method=d["method"],
            post_scores=np.asarray(d["post_scores"], dtype=np.float64),
            target_class=VeracityLabel(d["target_class"]),
            per_feature=None if pf is None else np.asarray(pf, dtype=np.float64),
            meta=d.get("meta", {}),
            thread_id=d.get("thread_id"),
            post_ids=d.get("post_ids"),
        )


def _target_index(fn: ModelFn, emb, stance, target) -> int:
    if target is None:
        return int(np.argmax(_logits(fn, emb, stance)))
    if isinstance(target, VeracityLabel):
        return target.index
    return int(target)


# --------------------------------------------------------------------------
# Integrated Gradients
# --------------------------------------------------------------------------

def _baselines(baseline, emb, stance):
    if baseline is None:
        return np.zeros_like(emb), np.zeros_like(stance)
    if isinstance(baseline, tuple):
        b_emb, b_st = (np.asarray(b, dtype=np.float64) for b in baseline)
    else:
        b_emb, b_st = np.asarray(baseline, dtype=np.float64), np.zeros_like(stance)
    if b_emb.shape != emb.shape or b_st.shape != stance.shape:
        raise AttributionError(
            f"baseline shapes {b_emb.shape}/{b_st.shape} vs inputs {emb.shape}/{stance.shape}")
    return b_emb, b_st


def integrated_gradients(
    model: Union["ModelParams", ModelFn],  # noqa: F821
    thread: EmbeddedThread,
    target: int | VeracityLabel | None = None,
    steps: int = 512,
    baseline=None,
) -> AttributionResult:
    """Midpoint-rule IG of the target logit, jointly over embedding and stance features.

    ``per_feature`` columns are the embedding features followed by the
    stance features; ``post_scores`` are its row sums.
    """
    if steps <= 0:
        raise AttributionError(f"steps must be positive, got {steps}")
    t0 = time.perf_counter()
    fn = _model_fn(model, thread)
    emb, stance = _features(thread)
    b_emb, b_st = _baselines(baseline, emb, stance)
    tgt = _target_index(fn, emb, stance, target)

    d_emb, d_st = emb - b_emb, stance - b_st
    g_emb = np.zeros_like(emb)
    g_st = np.zeros_like(stance)
    for t in range(1, steps + 1):
        alpha = (t - 0.5) / steps
        x_e = dc.inp(b_emb + alpha * d_emb)
        x_s = dc.inp(b_st + alpha * d_st)
        logits = fn(x_e, x_s)
        out = dc.gather_rows(dc.transpose(logits), [tgt])
        grads = dc.backprop(out)
        g_emb += grads.get(id(x_e), 0.0)
        g_st += grads.get(id(x_s), 0.0)
    per_feature = np.hstack([d_emb * (g_emb / steps), d_st * (g_st / steps)])
    return AttributionResult(
        method=IG,
        post_scores=per_feature.sum(axis=1),
        target_class=LABELS[tgt] if tgt < len(LABELS) else tgt,
        per_feature=per_feature,
        meta={"steps": steps, "elapsed_s": time.perf_counter() - t0,
              "embed_features": emb.shape[1], "stance_features": stance.shape[1]},
        thread_id=thread.thread_id,
        post_ids=[p.id for p in thread.posts],
    )


def completeness_gap(model, thread: EmbeddedThread, result: AttributionResult, baseline=None) -> tuple[float, float]:
    """``(|sum e - (F(x) - F(b))|, |F(x) - F(b)|)`` for an IG result."""
    fn = _model_fn(model, thread)
    emb, stance = _features(thread)
    b_emb, b_st = _baselines(baseline, emb, stance)
    tgt = result.target_class.index if isinstance(result.target_class, VeracityLabel) else int(result.target_class)
    delta = _logits(fn, emb, stance)[tgt] - _logits(fn, b_emb, b_st)[tgt]
    return abs(float(result.per_feature.sum()) - delta), abs(delta)


# --------------------------------------------------------------------------
# Shapley values over posts
# --------------------------------------------------------------------------

class CoalitionValue:
    """Target logit with only the posts in a bitmask coalition unmasked.

    Masked posts have their embedding and stance rows zeroed; the reply
    graph is left intact.  Values are memoised per coalition.
    """

    def __init__(self, fn: ModelFn, emb: np.ndarray, stance: np.ndarray, target: int):
        self.fn, self.emb, self.stance, self.target = fn, emb, stance, target
        self.l = emb.shape[0]
        self.cache: dict[int, float] = {}
        self.evaluations = 0

    def __call__(self, mask: int) -> float:
        v = self.cache.get(mask)
        if v is None:
            keep = np.array([(mask >> i) & 1 for i in range(self.l)], dtype=np.float64)[:, None]
            v = float(_logits(self.fn, self.emb * keep, self.stance * keep)[self.target])
            self.cache[mask] = v
            self.evaluations += 1
        return v


def _game(model, thread, target):
    fn = _model_fn(model, thread)
    emb, stance = _features(thread)
    tgt = _target_index(fn, emb, stance, target)
    return CoalitionValue(fn, emb, stance, tgt), tgt


def shapley_sampling(
    model, thread: EmbeddedThread, target=None, permutations: int = 2000, seed: int = 0,
    value: Callable[[int], float] | None = None,
) -> AttributionResult:
    """Permutation-sampling Shapley estimate with posts as players.

    ``value`` overrides the coalition value function (bitmask -> float).
    """
    if permutations < 1:
        raise AttributionError("need at least one permutation")
    t0 = time.perf_counter()
    l = thread.size
    if value is None:
        value, tgt = _game(model, thread, target)
    else:
        tgt = 0 if target is None else (target.index if isinstance(target, VeracityLabel) else int(target))
    rng = np.random.default_rng(seed)
    phi = np.zeros(l)
    empty = value(0)
    for _ in range(permutations):
        mask, prev = 0, empty
        for i in rng.permutation(l):
            mask |= 1 << int(i)
            cur = value(mask)
            phi[i] += cur - prev
            prev = cur
    phi /= permutations
    meta = {"permutations": permutations, "seed": seed, "elapsed_s": time.perf_counter() - t0}
    if isinstance(value, CoalitionValue):
        meta["evaluations"] = value.evaluations
    return AttributionResult(SV, phi, LABELS[tgt], meta=meta, thread_id=thread.thread_id,
                             post_ids=[p.id for p in thread.posts])


def shapley_exact(
    model, thread: EmbeddedThread, target=None, value: Callable[[int], float] | None = None,
) -> AttributionResult:
    """Exact Shapley values by enumerating all ``2**l`` coalitions (``l <= 12``)."""
    l = thread.size
    if l > MAX_EXACT_POSTS:
        raise AttributionError(f"exact Shapley refused: {l} posts > {MAX_EXACT_POSTS}")
    t0 = time.perf_counter()
    if value is None:
        value, tgt = _game(model, thread, target)
    else:
        tgt = 0 if target is None else (target.index if isinstance(target, VeracityLabel) else int(target))
    v = np.array([value(m) for m in range(1 << l)])
    sizes = np.array([bin(m).count("1") for m in range(1 << l)])
    weight = np.array([math.factorial(s) * math.factorial(l - s - 1) / math.factorial(l)
                       for s in range(l)])
    phi = np.zeros(l)
    for i in range(l):
        bit = 1 << i
        without = np.array([m for m in range(1 << l) if not m & bit], dtype=np.int64)
        phi[i] = float(np.sum(weight[sizes[without]] * (v[without | bit] - v[without])))
    return AttributionResult(SV, phi, LABELS[tgt],
                             meta={"exact": True, "elapsed_s": time.perf_counter() - t0},
                             thread_id=thread.thread_id, post_ids=[p.id for p in thread.posts])


# --------------------------------------------------------------------------
# important set and subsets
# --------------------------------------------------------------------------

def important_set(result: AttributionResult | Sequence[float]) -> list[int]:
    """Indices with strictly positive importance, by score descending (ties by index)."""
    scores = np.asarray(result.post_scores if isinstance(result, AttributionResult) else result)
    return [i for i in ranking_of(scores) if scores[i] > 0]


@dataclass
class SubsetSelection:
    k: float
    members: list[int]
    cumulative_share: float


def select_topk(result: AttributionResult | Sequence[float], k: float) -> SubsetSelection:
    """Top ``ceil(k% * |I|)`` members of the important set."""
    if not 0 < k <= 100:
        raise AttributionError(f"k must lie in (0, 100], got {k}")
    scores = np.asarray(result.post_scores if isinstance(result, AttributionResult) else result)
    imp = important_set(scores)
    if not imp:
        return SubsetSelection(k, [], 0.0)
    size = math.ceil(k * len(imp) / 100 - 1e-12)
    members = imp[:size]
    total = scores[imp].sum()
    share = 1.0 if size == len(imp) else float(scores[members].sum() / total)
    return SubsetSelection(k, members, share)


def mean_shares(results: Sequence[AttributionResult], ks: Sequence[float] = (25, 50)) -> dict[float, float]:
    """Dataset mean of each thread's cumulative importance share per ``k``."""
    out = {}
    for k in ks:
        shares = [select_topk(r, k).cumulative_share for r in results]
        out[k] = float(np.mean(shares)) if shares else 0.0
    return out


def importance_share_report(
    dataset: Sequence[EmbeddedThread], params, method: str = IG,
    ks: Sequence[float] = (25, 50), **kwargs,
) -> dict[float, float]:
    fns = {IG: integrated_gradients, SV: shapley_sampling}
    if method not in fns:
        raise AttributionError(f"unknown method {method!r}")
    return mean_shares([fns[method](params, t, **kwargs) for t in dataset], ks)
