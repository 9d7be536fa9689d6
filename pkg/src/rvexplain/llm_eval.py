"""LLM-as-judge scoring of explanations: prompt, clients, caching, verdicts."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from ._io import atomic_write_json
from .ingest import VeracityLabel

log = logging.getLogger(__name__)

INSTRUCTIONS = (
    "You will be shown a Claim and an Explanation. The veracity of the Claim can either be "
    "true, false or unverified. Choose an option from A to D that answers whether the "
    "Explanation can help confirm the veracity of the Claim."
)

OPTIONS = (
    ("A", "The Explanation confirms the information in the Claim is true. The Explanation will "
          "include evidence to prove the Claim or show users believing the Claim."),
    ("B", "The Explanation confirms the information in the Claim is false. The Explanation will "
          "include evidence to disprove the Claim or show users denying the Claim."),
    ("C", "The Explanation confirms the information in the Claim is unverified. The Explanation "
          "will state no evidence exists to prove or disprove the Claim or show users doubting "
          "the Claim."),
    ("D", "The Explanation is irrelevant in confirming the veracity of the Claim. The Explanation "
          "will not include any mention of evidence and users will not address the veracity of "
          "the Claim."),
)

FEW_SHOT = (
    ("Victims were forced to hold a flag on the cafe window.",
     "Users believe this is true and point to the released footage.", "A"),
    ("BREAKING: Hostages are running out of the cafe #sydneysiege",
     "Some users believe the claim is unverified as Channel 9 did not confirm and some agree "
     "that the details of potential escape should not be disclosed.", "C"),
    ("One of the gunmen left an ID behind in the car.",
     "One of the gunmen left an ID behind in the car. The majority deny the ID was found there "
     "and point to the media for blame.", "B"),
    ("Three people have died in the shooting.",
     "Three people have died in the shooting. Most users pray the attack is over soon.", "D"),
    ("NEWS #Germanwings co-pilot Andreas Lubitz had serious depressive episode (Bild newspaper) "
     "#4U9525 URL LINK",
     "Germanwings co-pilot Andrés Lubitz has serious depressive episode. Never trust bild. Users "
     "believe that bild is a fake newspaper and the stories concerned with the suicide of "
     "Andreas Lubitz should not be discussed.", "C"),
    ("Snipers set up on National Art Gallery as we remain barricaded in Centre Block on "
     "Parliament Hill #cdnpoli.",
     "Snipers set up on National Art Gallery as we remain barricaded in Centre Block on "
     "Parliament Hill. Most users are skeptical about the news and await more details.", "C"),
    ("BREAKING: #Germanwings co-pilot's name is Andreas Lubitz, a German national, says "
     "Marseilles prosecutor.",
     "He didn’t have a political or religious background.", "D"),
    ("Several bombs have been placed in the city",
     "This is false, why then cause panic and circulate on social media?", "B"),
    ("Police report the threats released by the criminals.",
     "The majority threaten to condemn anyone who is a terrorist.", "D"),
    ("#CharlieHebdo attackers shouted 'The Prophet is avenged'.",
     "In video showing assassination of officer.walking back to car they shouted: 'we avenged "
     "the prophet.We killed Charlie Hebdo'", "A"),
)

LETTER_TO_LABEL = {"A": "true", "B": "false", "C": "unverified", "D": "uninformative"}
FAITHFUL, UNFAITHFUL, UNINFORMATIVE = "faithful", "unfaithful", "uninformative"

_DELIMITER = re.compile(r"your\s+answer", re.IGNORECASE)


class EvalError(RuntimeError):
    pass


class EvaluatorUnavailable(EvalError):
    pass


@dataclass(frozen=True)
class EvalPrompt:
    rendered: str
    claim: str
    explanation: str
    few_shot_count: int
    flagged: bool = False

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.rendered.encode("utf-8")).hexdigest()


def _one_line(text: str) -> str:
    return " ".join(text.split())


def render_prompt(claim: str, explanation: str) -> EvalPrompt:
    """Instructions, options, the ten worked examples, then the target pair.

    Slot text is collapsed onto one line so it cannot open a new prompt
    section; an explanation mentioning "Your answer" is flagged.
    """
    claim_1, expl_1 = _one_line(claim), _one_line(explanation)
    if not claim_1:
        raise EvalError("empty claim")
    if not expl_1:
        raise EvalError("empty explanation")
    flagged = bool(_DELIMITER.search(claim_1) or _DELIMITER.search(expl_1))
    parts = [INSTRUCTIONS, ""]
    parts += [f"{letter}: {text}" for letter, text in OPTIONS]
    parts.append("")
    for c, e, a in FEW_SHOT:
        parts += [f"Claim: {c}", f"Explanation: {e}", f"Your answer: {a}", ""]
    parts += [f"Claim: {claim_1}", f"Explanation: {expl_1}"]
    return EvalPrompt("\n".join(parts) + "\n", claim_1, expl_1, len(FEW_SHOT), flagged)


_ANSWER = re.compile(r"answer\W{0,3}(?:is\W{0,3})?\(?([ABCD])\b", re.IGNORECASE)
_STANDALONE = re.compile(r"(?<![A-Za-z0-9'’])([ABCD])(?![A-Za-z0-9'’])")


def parse_letter(response: str) -> str | None:
    """Option letter from a reply: an explicit "answer ... X" first, else the first standalone A-D."""
    m = _ANSWER.search(response)
    if m and m.group(1).isupper():
        return m.group(1)
    m = _STANDALONE.search(response)
    return m.group(1) if m else None


def categorize(letter: str, prediction: VeracityLabel | str) -> str:
    if letter not in LETTER_TO_LABEL:
        raise EvalError(f"invalid option letter {letter!r}")
    if letter == "D":
        return UNINFORMATIVE
    pred = prediction.value if isinstance(prediction, VeracityLabel) else str(prediction)
    return FAITHFUL if LETTER_TO_LABEL[letter] == pred else UNFAITHFUL


@dataclass
class EvalVerdict:
    letter: str | None
    mapped: str | None
    raw_response: str
    model_name: str
    temperature: float
    run: int = 0
    category_vs_prediction: str | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# clients
# --------------------------------------------------------------------------

class EvaluatorClient(Protocol):
    model_name: str
    requests: int

    def complete(self, prompt: EvalPrompt, temperature: float) -> str: ...


class StubEvaluator:
    """Keyword rules over the target explanation; deterministic for every temperature."""

    RULES = (
        (re.compile(r"\b(false|fake|deny|denies|denied|hoax|not true)\b", re.I), "B"),
        (re.compile(r"\b(unverified|unconfirmed|sceptical|skeptical|doubt\w*|question\w*|wonder\w*)\b", re.I), "C"),
        (re.compile(r"\b(true|confirm\w*|believ\w*|prove[ns]?)\b", re.I), "A"),
    )

    def __init__(self, model_name: str = "stub-keyword"):
        self.model_name = model_name
        self.requests = 0

    def complete(self, prompt: EvalPrompt, temperature: float) -> str:
        self.requests += 1
        for pattern, letter in self.RULES:
            if pattern.search(prompt.explanation):
                return f"Your answer: {letter}"
        return "Your answer: D"


class ChatCompletionsClient:
    """OpenAI-style ``/chat/completions`` client; the key comes from an environment variable."""

    def __init__(self, model_name: str, base_url: str = "https://api.openai.com/v1",
                 api_key_env: str = "OPENAI_API_KEY", timeout: float = 60.0, retries: int = 3,
                 backoff: float = 2.0, max_tokens: int = 16, system_message: str | None = None,
                 client=None):
        import httpx

        self.model_name = model_name
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.api_key_env = api_key_env
        self.retries = retries
        self.backoff = backoff
        self.max_tokens = max_tokens
        self.system_message = system_message
        self.client = client or httpx.Client(timeout=timeout)
        self.requests = 0
        self._lock = threading.Lock()

    def complete(self, prompt: EvalPrompt, temperature: float) -> str:
        import httpx

        key = os.environ.get(self.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        messages = [{"role": "user", "content": prompt.rendered}]
        if self.system_message:
            messages.insert(0, {"role": "system", "content": self.system_message})
        body = {"model": self.model_name, "messages": messages, "temperature": temperature,
                "max_tokens": self.max_tokens}
        last = None
        for attempt in range(self.retries + 1):
            with self._lock:
                self.requests += 1
            try:
                resp = self.client.post(self.url, json=body, headers=headers)
                resp.raise_for_status()
                return resp.json()["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last = exc
                log.warning("evaluator attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * 2 ** attempt)
        raise EvaluatorUnavailable(f"evaluator failed after {self.retries + 1} attempts: {last}")


class ResponseCache:
    """One JSON record per (model, temperature, prompt hash, run) under ``root``."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None
        self._mem: dict[str, str] = {}
        self._write = threading.Lock()

    @staticmethod
    def key(model: str, temperature: float, prompt_hash: str, run: int) -> str:
        raw = json.dumps([model, float(temperature), prompt_hash, run])
        return hashlib.sha256(raw.encode()).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, model, temperature, prompt_hash, run) -> str | None:
        k = self.key(model, temperature, prompt_hash, run)
        if k in self._mem:
            return self._mem[k]
        if self.root is not None and self._path(k).is_file():
            rec = json.loads(self._path(k).read_text(encoding="utf-8"))
            self._mem[k] = rec["response"]
            return rec["response"]
        return None

    def put(self, model, temperature, prompt_hash, run, response: str) -> None:
        k = self.key(model, temperature, prompt_hash, run)
        with self._write:
            self._mem[k] = response
            if self.root is not None:
                atomic_write_json(self._path(k), {
                    "prompt_hash": prompt_hash, "model": model, "temperature": float(temperature),
                    "run": run, "response": response,
                })


def query_evaluator(client: EvaluatorClient, prompt: EvalPrompt, temperature: float = 0.0,
                    runs: int = 1, cache: ResponseCache | None = None,
                    prediction: VeracityLabel | str | None = None) -> list[EvalVerdict]:
    """One verdict per run, served from ``cache`` when possible."""
    cache = cache if cache is not None else ResponseCache(None)
    verdicts = []
    for run in range(runs):
        response = cache.get(client.model_name, temperature, prompt.hash, run)
        if response is None:
            response = client.complete(prompt, temperature)
            cache.put(client.model_name, temperature, prompt.hash, run, response)
        letter = parse_letter(response)
        v = EvalVerdict(letter, LETTER_TO_LABEL.get(letter), response, client.model_name,
                        temperature, run)
        if letter is None:
            v.error = "unparseable"
        elif prediction is not None:
            v.category_vs_prediction = categorize(letter, prediction)
        verdicts.append(v)
    return verdicts


def query_many(client: EvaluatorClient, prompts: Sequence[EvalPrompt], temperature: float = 0.0,
               runs: int = 1, cache: ResponseCache | None = None,
               predictions: Sequence | None = None, max_workers: int = 4) -> list[list[EvalVerdict]]:
    """``query_evaluator`` over many prompts with bounded concurrency; order preserved."""
    cache = cache if cache is not None else ResponseCache(None)
    preds = list(predictions) if predictions is not None else [None] * len(prompts)
    if max_workers <= 1:
        return [query_evaluator(client, p, temperature, runs, cache, y) for p, y in zip(prompts, preds)]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(query_evaluator, client, p, temperature, runs, cache, y)
                   for p, y in zip(prompts, preds)]
        return [f.result() for f in futures]


DEFAULT_TEMPERATURES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass
class ConsistencyTable:
    per_temperature: dict[float, float]
    letters: dict[float, list[list[str | None]]] = field(default_factory=dict)
    overall_label_agreement: float = 0.0


def consistency_probe(client: EvaluatorClient, items: Sequence[tuple[str, str]],
                      temperatures: Sequence[float] = DEFAULT_TEMPERATURES, runs: int = 3,
                      cache: ResponseCache | None = None) -> ConsistencyTable:
    """Fraction of items with identical letters across runs, per temperature.

    ``overall_label_agreement`` is the share of all emitted labels equal to
    their item's most common label over every temperature and run.
    """
    prompts = [render_prompt(c, e) for c, e in items]
    per_t, letters = {}, {}
    pooled: list[list[str | None]] = [[] for _ in prompts]
    for t in temperatures:
        rows = []
        for i, p in enumerate(prompts):
            row = [v.letter for v in query_evaluator(client, p, t, runs, cache)]
            rows.append(row)
            pooled[i].extend(row)
        letters[t] = rows
        per_t[t] = sum(len(set(r)) == 1 for r in rows) / len(rows) if rows else 1.0
    total = sum(len(r) for r in pooled)
    agree = sum(max(r.count(x) for x in set(r)) for r in pooled if r)
    return ConsistencyTable(per_t, letters, agree / total if total else 1.0)
