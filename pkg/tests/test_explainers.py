import httpx
import numpy as np
import pytest

from rvexplain.attribution import IG, SV, AttributionResult, select_topk
from rvexplain.explainers import (GENERIC, IMPORTANT_RESPONSE, OUT_OF_DOMAIN, SIMILAR_RESPONSE, ExplainerError,
                                  ExplanationCandidate, HTTPSummarizer, StubSummarizer, SummarizerError,
                                  SummarizerSpec, generate_all, important_response, out_of_domain_summary,
                                  similar_response, summarize_subset)
from rvexplain.ingest import VeracityLabel, build_thread
from rvexplain.metrics import REPORT_ROWS

CLAIM = ("Update from Ottawa: Cdn soldier dies from shooting -Parliamentary guard wounded "
         "Parliament Hill still in lockdown URL")
REPLIES = [
    "@TorontoStar Ok, time to take it to the *** muslims. Look out Allah, here comes the revenge. ***.",
    "#AttackinOttawa @TorontoStar: Update Cdn soldier dies from shooting -Parliamentary guard wounded "
    "Parliament Hill still in lockdown URL",
    "@TorontoStar where is the confirmation coming from?",
    "It looks like confirmations are coming in now.",
    "@TorontoStar I don't think the soldier is dead.",
    "@TorontoStar URL",
    "@cbc who is responsible for this?",
    "praying for the soldier and his family",
    "media got the lockdown wrong again",
]


@pytest.fixture
def ottawa():
    raw = [{"id": "src", "text": CLAIM, "timestamp": 0}]
    raw += [{"id": f"r{i}", "text": txt, "parent_id": "src", "timestamp": i + 1} for i, txt in enumerate(REPLIES)]
    t = build_thread("ottawa1", "ottawashooting", raw, "src", VeracityLabel.UNVERIFIED)
    rng = np.random.default_rng(0)
    src = rng.normal(size=8)
    t.embeddings = rng.normal(size=(t.size, 8))
    t.embeddings[0] = src
    t.embeddings[2] = src * 3 + 0.01 * rng.normal(size=8)  # the echoing reply
    t.stance = np.eye(4)[np.arange(t.size) % 4]
    return t


def scores_for(t, values):
    return AttributionResult(IG, np.asarray(values, dtype=float), VeracityLabel.UNVERIFIED,
                             thread_id=t.thread_id, post_ids=[p.id for p in t.posts])


def test_important_response_is_top_reply(ottawa):
    r = scores_for(ottawa, [9.0, 5.0, 1.0, 0.5, 0.2, 0.1, 0.1, 0.0, -1.0, 0.0])
    c = important_response(ottawa, r)
    assert c.kind == IMPORTANT_RESPONSE and c.model_dependent
    assert c.text == ottawa.posts[1].clean_text
    assert c.text.startswith("Ok, time to take it")
    assert c.label == "Important Response (IG)"


def test_important_response_tie_goes_to_earlier_post(ottawa):
    r = scores_for(ottawa, [0.0, 1.0, 2.0, 2.0] + [0.0] * 6)
    assert important_response(ottawa, r).source_post_ids == [ottawa.posts[2].id]


def test_similar_response_finds_echo(ottawa):
    c = similar_response(ottawa)
    assert c.kind == SIMILAR_RESPONSE and not c.model_dependent
    assert c.text == ottawa.posts[2].clean_text
    assert c.text.startswith("#AttackinOttawa : Update Cdn soldier")


def test_similar_response_zero_norm_source(ottawa):
    ottawa.embeddings[0] = 0
    with pytest.raises(ExplainerError, match="zero norm"):
        similar_response(ottawa)


def test_extractive_candidates_are_clean_texts(ottawa):
    r = scores_for(ottawa, np.linspace(1, -1, ottawa.size))
    texts = {p.clean_text for p in ottawa.posts}
    assert important_response(ottawa, r).text in texts
    assert similar_response(ottawa).text in texts


def test_stub_opinion_summary(ottawa):
    r = scores_for(ottawa, [0, 0.1, 0, 2.0, 1.0, 3.0, 0, 0.5, 0, 0])
    sel = select_topk(r, 50)
    assert sel.members == [5, 3, 4]
    c = summarize_subset(ottawa, sel, SummarizerSpec(), method=IG)
    # claim first, then the selected posts in thread order
    assert c.text == ("Main story: " + ottawa.source.clean_text + " Majority opinion: "
                      + ottawa.posts[3].clean_text + " " + ottawa.posts[4].clean_text)
    assert c.source_post_ids == ["src", "r2", "r3", "r4"]
    assert c.kind == "summary_I50" and c.label == "Summary of I_50 (IG)"
    again = summarize_subset(ottawa, sel, SummarizerSpec(), method=IG)
    assert again.text == c.text


def test_single_post_selection_still_summarised(ottawa):
    stub = StubSummarizer()
    r = scores_for(ottawa, [0, 0, 0, 1.0] + [0] * 6)
    c = summarize_subset(ottawa, select_topk(r, 25), SummarizerSpec(), stub, IG)
    assert stub.requests == 1 and c.source_post_ids == ["src", "r2"]


def test_empty_selection_falls_back(ottawa):
    r = scores_for(ottawa, [-1.0] * ottawa.size)
    c = summarize_subset(ottawa, select_topk(r, 25), SummarizerSpec(), method=IG)
    assert c.fallback == OUT_OF_DOMAIN and c.warnings
    assert c.model_dependent and c.kind == "summary_I25"


def test_out_of_domain_summary_drops_empty_posts(ottawa):
    stub = StubSummarizer()
    seen = []
    stub_call = stub.summarize
    stub.summarize = lambda flavor, claim, posts: seen.append(list(posts)) or stub_call(flavor, claim, posts)
    c = out_of_domain_summary(ottawa, SummarizerSpec(flavor=GENERIC), stub)
    assert "" not in seen[0] and len(seen[0]) == len(REPLIES) - 1  # "@TorontoStar URL" cleans to ""
    assert not c.model_dependent
    first3 = [ottawa.source.clean_text, ottawa.posts[1].clean_text, ottawa.posts[2].clean_text]
    assert c.text == " ".join(first3)


def test_length_cap_drops_least_important(ottawa):
    r = scores_for(ottawa, [0, 9.0, 0, 0, 0, 0, 0, 0, 1.0, 5.0])
    spec = SummarizerSpec(max_chars=len(ottawa.source.clean_text) + 140)
    c = summarize_subset(ottawa, select_topk(r, 100), spec, method=IG)
    assert c.source_post_ids == ["src", "r0", "r8"]
    assert any("truncated" in w for w in c.warnings)


def test_nested_source_ids(ottawa):
    rng = np.random.default_rng(3)
    r = scores_for(ottawa, rng.normal(size=ottawa.size))
    ids = [set(summarize_subset(ottawa, select_topk(r, k), SummarizerSpec(), method=IG).source_post_ids)
           for k in (25, 50, 100)]
    assert ids[0] <= ids[1] <= ids[2]


def test_generate_all_full(ottawa):
    rng = np.random.default_rng(1)
    atts = {IG: scores_for(ottawa, rng.normal(size=ottawa.size)),
            SV: AttributionResult(SV, rng.normal(size=ottawa.size), VeracityLabel.UNVERIFIED)}
    cs = generate_all(ottawa, atts, SummarizerSpec())
    assert len(cs.candidates) == 10 and not cs.failures
    assert sorted(c.label for c in cs.candidates) == sorted(REPORT_ROWS)
    flags = {c.label: c.model_dependent for c in cs.candidates}
    assert not flags["Similar Response"] and not flags["Out-of-domain Summary"]
    assert sum(flags.values()) == 8
    again = generate_all(ottawa, atts, SummarizerSpec())
    assert [c.to_dict() for c in again.candidates] == [c.to_dict() for c in cs.candidates]


def test_generate_all_without_sv(ottawa):
    cs = generate_all(ottawa, {IG: scores_for(ottawa, np.ones(ottawa.size))}, SummarizerSpec())
    assert len(cs.candidates) == 6 and len(cs.failures) == 4
    assert all("_sv" in f.key for f in cs.failures)


def test_generate_all_empty_important_set_flags_fallback(ottawa):
    atts = {IG: scores_for(ottawa, -np.ones(ottawa.size)), SV: scores_for(ottawa, np.ones(ottawa.size))}
    cs = generate_all(ottawa, atts, SummarizerSpec())
    ig_summaries = [c for c in cs.candidates if c.kind.startswith("summary") and c.method == IG]
    assert len(ig_summaries) == 3 and all(c.fallback == OUT_OF_DOMAIN for c in ig_summaries)


def test_candidate_round_trip(ottawa):
    c = similar_response(ottawa)
    assert ExplanationCandidate.from_dict(c.to_dict()) == c


def test_unknown_flavor():
    with pytest.raises(ExplainerError):
        SummarizerSpec(flavor="poetry")


def test_http_summarizer_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"summary": "ok"})

    s = HTTPSummarizer("http://summ/api", retries=2, backoff=0.0,
                       client=httpx.Client(transport=httpx.MockTransport(handler)))
    assert s.summarize("generic", "claim", ["a"]) == "ok"
    assert s.requests == 2
    assert b'"flavor"' in calls[0].content


def test_http_summarizer_gives_up():
    s = HTTPSummarizer("http://summ/api", retries=1, backoff=0.0,
                       client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500))))
    with pytest.raises(SummarizerError, match="2 attempts"):
        s.summarize("generic", "claim", [])
