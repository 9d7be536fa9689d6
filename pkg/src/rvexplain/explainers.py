"""Explanation candidates: extractive picks and summaries of important posts."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .attribution import IG, SV, AttributionResult, SubsetSelection, select_topk
from .ingest import EmbeddedThread

log = logging.getLogger(__name__)

OPINION = "opinion_template"
GENERIC = "generic"

IMPORTANT_RESPONSE = "important_response"
SIMILAR_RESPONSE = "similar_response"
OUT_OF_DOMAIN = "out_of_domain_summary"
SUMMARY_KINDS = {25: "summary_I25", 50: "summary_I50", 100: "summary_I"}


class ExplainerError(RuntimeError):
    pass


class SummarizerError(ExplainerError):
    """Summarizer call failed after the allowed retries."""


@dataclass
class ExplanationCandidate:
    kind: str
    text: str
    source_post_ids: list[str]
    model_dependent: bool
    method: str | None = None
    warnings: list[str] = field(default_factory=list)
    fallback: str | None = None

    @property
    def label(self) -> str:
        """Row label used in the accounting report."""
        if self.kind == IMPORTANT_RESPONSE:
            return f"Important Response ({self.method})"
        if self.kind == SIMILAR_RESPONSE:
            return "Similar Response"
        if self.kind == OUT_OF_DOMAIN:
            return "Out-of-domain Summary"
        suffix = {"summary_I25": "I_25", "summary_I50": "I_50", "summary_I": "I"}[self.kind]
        return f"Summary of {suffix} ({self.method})"

    @property
    def key(self) -> str:
        return f"{self.kind}_{self.method.lower()}" if self.method else self.kind

    def to_dict(self) -> dict:
        return {**asdict(self), "key": self.key, "label": self.label}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExplanationCandidate":
        fields = ("kind", "text", "source_post_ids", "model_dependent", "method", "warnings", "fallback")
        return cls(**{k: d[k] for k in fields if k in d})


# --------------------------------------------------------------------------
# summarizer services
# --------------------------------------------------------------------------

@dataclass
class SummarizerSpec:
    flavor: str = OPINION
    endpoint: str | None = None  # None selects the in-process stub
    max_input_posts: int = 200
    max_chars: int = 2000
    timeout: float = 60.0
    retries: int = 2

    def __post_init__(self):
        if self.flavor not in (OPINION, GENERIC):
            raise ExplainerError(f"unknown summarizer flavor {self.flavor!r}")


class Summarizer(Protocol):
    requests: int

    def summarize(self, flavor: str, claim: str, posts: Sequence[str]) -> str: ...


class StubSummarizer:
    """Deterministic extractive stand-in for the summarization services.

    ``opinion_template`` returns the claim as the main story and the first
    two posts as the majority opinion; ``generic`` concatenates the first
    three texts (claim included).
    """

    def __init__(self):
        self.requests = 0

    def summarize(self, flavor: str, claim: str, posts: Sequence[str]) -> str:
        self.requests += 1
        if flavor == OPINION:
            opinion = " ".join(posts[:2]) if posts else "none expressed"
            return f"Main story: {claim} Majority opinion: {opinion}"
        return " ".join([claim, *posts][:3])


class HTTPSummarizer:
    """POST ``{flavor, claim, posts}`` and read ``{summary}`` back."""

    def __init__(self, endpoint: str, timeout: float = 60.0, retries: int = 2, backoff: float = 1.0,
                 client=None):
        import httpx

        self.endpoint = endpoint
        self.retries = retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)
        self.requests = 0

    def summarize(self, flavor: str, claim: str, posts: Sequence[str]) -> str:
        import httpx

        payload = {"flavor": flavor, "claim": claim, "posts": list(posts)}
        last = None
        for attempt in range(self.retries + 1):
            self.requests += 1
            try:
                resp = self.client.post(self.endpoint, json=payload)
                resp.raise_for_status()
                summary = resp.json()["summary"]
                if not isinstance(summary, str):
                    raise SummarizerError("'summary' is not a string")
                return summary
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last = exc
                log.warning("summarizer attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise SummarizerError(f"summarizer failed after {self.retries + 1} attempts: {last}")


def make_summarizer(spec: SummarizerSpec) -> Summarizer:
    if spec.endpoint is None:
        return StubSummarizer()
    return HTTPSummarizer(spec.endpoint, timeout=spec.timeout, retries=spec.retries)


def _capped(texts: list[str], max_chars: int) -> list[str]:
    """Drop trailing (least important) texts until the total fits ``max_chars``."""
    out = list(texts)
    while out and sum(len(t) for t in out) > max_chars:
        out.pop()
    if not out and texts:
        out = [texts[0][:max_chars]]
    return out


def _summarise(thread: EmbeddedThread, indices: Sequence[int], flavor: str,
               spec: SummarizerSpec, service: Summarizer) -> tuple[str, list[str], list[str]]:
    """Claim first, then the selected posts in thread (depth-first) order.

    ``indices`` come most important first, so length caps drop from the
    end of that list.  Empty texts are dropped.
    """
    warnings = []
    claim = thread.source.clean_text or thread.source.text
    chosen = [i for i in indices if i != 0 and thread.posts[i].clean_text]
    chosen = chosen[:spec.max_input_posts]
    texts = [thread.posts[i].clean_text for i in chosen]
    budget = max(spec.max_chars - len(claim), 0)
    kept = _capped(texts, budget) if texts else []
    if len(kept) < len(texts):
        warnings.append(f"input truncated to {len(kept)} of {len(texts)} posts ({spec.max_chars} chars)")
    chosen = sorted(chosen[:len(kept)])
    kept = [thread.posts[i].clean_text[:budget] for i in chosen] if kept else []
    text = service.summarize(flavor, claim, kept)
    ids = [thread.source.id] + [thread.posts[i].id for i in chosen]
    return text, ids, warnings


# --------------------------------------------------------------------------
# candidates
# --------------------------------------------------------------------------

def important_response(thread: EmbeddedThread, attribution: AttributionResult) -> ExplanationCandidate:
    if thread.size < 2:
        raise ExplainerError("no responses")
    scores = attribution.post_scores
    best = max(range(1, thread.size), key=lambda i: (scores[i], -i))
    post = thread.posts[best]
    return ExplanationCandidate(IMPORTANT_RESPONSE, post.clean_text, [post.id], True, attribution.method)


def similar_response(thread: EmbeddedThread) -> ExplanationCandidate:
    if thread.embeddings is None:
        raise ExplainerError("embeddings not attached")
    if thread.size < 2:
        raise ExplainerError("no responses")
    emb = thread.embeddings
    src = emb[0]
    src_norm = np.linalg.norm(src)
    if src_norm == 0:
        raise ExplainerError("source embedding has zero norm")
    best, best_cos = None, -np.inf
    for i in range(1, thread.size):
        norm = np.linalg.norm(emb[i])
        if norm == 0:
            continue
        cos = float(emb[i] @ src / (norm * src_norm))
        if cos > best_cos:
            best, best_cos = i, cos
    if best is None:
        raise ExplainerError("all response embeddings have zero norm")
    post = thread.posts[best]
    return ExplanationCandidate(SIMILAR_RESPONSE, post.clean_text, [post.id], False)


def out_of_domain_summary(thread: EmbeddedThread, spec: SummarizerSpec,
                          service: Summarizer | None = None) -> ExplanationCandidate:
    service = service or make_summarizer(spec)
    text, ids, warnings = _summarise(thread, range(thread.size), GENERIC, spec, service)
    return ExplanationCandidate(OUT_OF_DOMAIN, text, ids, False, warnings=warnings)


def summarize_subset(thread: EmbeddedThread, selection: SubsetSelection, spec: SummarizerSpec,
                     service: Summarizer | None = None, method: str | None = None,
                     fallback_spec: SummarizerSpec | None = None) -> ExplanationCandidate:
    """Summary of the selected posts; an empty selection falls back to the out-of-domain summary."""
    service = service or make_summarizer(spec)
    kind = SUMMARY_KINDS.get(int(selection.k), f"summary_I{selection.k:g}")
    if not selection.members:
        fb = fallback_spec or SummarizerSpec(flavor=GENERIC, endpoint=spec.endpoint,
                                             max_chars=spec.max_chars, timeout=spec.timeout,
                                             retries=spec.retries)
        ood = out_of_domain_summary(thread, fb, service)
        msg = "empty important-post selection, fell back to out-of-domain summary"
        log.warning("thread %s: %s", thread.thread_id, msg)
        return ExplanationCandidate(kind, ood.text, ood.source_post_ids, True, method,
                                    warnings=[msg, *ood.warnings], fallback=OUT_OF_DOMAIN)
    text, ids, warnings = _summarise(thread, selection.members, spec.flavor, spec, service)
    return ExplanationCandidate(kind, text, ids, True, method, warnings=warnings)


@dataclass
class CandidateFailure:
    key: str
    reason: str


@dataclass
class CandidateSet:
    candidates: list[ExplanationCandidate]
    failures: list[CandidateFailure]


def generate_all(
    thread: EmbeddedThread,
    attributions: Mapping[str, AttributionResult | None],
    spec: SummarizerSpec,
    generic_spec: SummarizerSpec | None = None,
    ks: Sequence[int] = (25, 50, 100),
    service: Summarizer | None = None,
    generic_service: Summarizer | None = None,
) -> CandidateSet:
    """Every candidate kind for one thread; per-candidate failures are recorded, not raised."""
    generic_spec = generic_spec or SummarizerSpec(flavor=GENERIC, endpoint=spec.endpoint,
                                                  max_chars=spec.max_chars, timeout=spec.timeout,
                                                  retries=spec.retries)
    service = service or make_summarizer(spec)
    generic_service = generic_service or (service if generic_spec.endpoint == spec.endpoint
                                          else make_summarizer(generic_spec))
    out, failures = [], []

    def attempt(key, fn):
        try:
            out.append(fn())
        except (ExplainerError, ValueError) as exc:
            failures.append(CandidateFailure(key, str(exc)))

    for method in (IG, SV):
        res = attributions.get(method)
        if res is None:
            failures.append(CandidateFailure(f"{IMPORTANT_RESPONSE}_{method.lower()}", "attribution missing"))
            continue
        attempt(f"{IMPORTANT_RESPONSE}_{method.lower()}", lambda: important_response(thread, res))
    attempt(SIMILAR_RESPONSE, lambda: similar_response(thread))
    for method in (IG, SV):
        res = attributions.get(method)
        for k in ks:
            key = f"{SUMMARY_KINDS.get(k, f'summary_I{k}')}_{method.lower()}"
            if res is None:
                failures.append(CandidateFailure(key, "attribution missing"))
                continue
            attempt(key, lambda: summarize_subset(thread, select_topk(res, k), spec, service, method,
                                                  fallback_spec=generic_spec))
    attempt(OUT_OF_DOMAIN, lambda: out_of_domain_summary(thread, generic_spec, generic_service))
    return CandidateSet(out, failures)
