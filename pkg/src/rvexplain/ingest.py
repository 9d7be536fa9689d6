"""Conversation-thread loading: PHEME directories, JSONL, feature sidecars."""

from __future__ import annotations

import enum
import json
import logging
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class IngestError(ValueError):
    pass


class VeracityLabel(str, enum.Enum):
    TRUE = "true"
    FALSE = "false"
    UNVERIFIED = "unverified"

    @property
    def index(self) -> int:
        return LABELS.index(self)

    @classmethod
    def from_index(cls, i: int) -> "VeracityLabel":
        return LABELS[i]


# class order doubles as the argmax tie-break order
LABELS = (VeracityLabel.TRUE, VeracityLabel.FALSE, VeracityLabel.UNVERIFIED)


@dataclass(frozen=True)
class Post:
    id: str
    text: str
    clean_text: str
    parent_id: str | None = None
    timestamp: int | None = None
    is_source: bool = False


@dataclass
class EmbeddedThread:
    thread_id: str
    event: str
    posts: list[Post]
    embeddings: np.ndarray | None = None
    stance: np.ndarray | None = None
    gold_label: VeracityLabel | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.posts)

    @property
    def source(self) -> Post:
        return self.posts[0]

    def index_of(self, post_id: str) -> int:
        for i, p in enumerate(self.posts):
            if p.id == post_id:
                return i
        raise KeyError(post_id)

    @property
    def has_features(self) -> bool:
        return self.embeddings is not None and self.stance is not None

    def to_dict(self) -> dict:
        d = {
            "format_version": FORMAT_VERSION,
            "thread_id": self.thread_id,
            "event": self.event,
            "label": self.gold_label.value if self.gold_label else None,
            "posts": [
                {"id": p.id, "text": p.text, "parent_id": p.parent_id, "timestamp": p.timestamp}
                for p in self.posts
            ],
        }
        if self.embeddings is not None:
            d["embeddings"] = self.embeddings.tolist()
        if self.stance is not None:
            d["stance"] = self.stance.tolist()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)


# --------------------------------------------------------------------------
# text cleaning and suitability
# --------------------------------------------------------------------------

_URL = re.compile(r"(?:https?://\S+|\bURL\b)")
_MENTION = re.compile(r"@\w+")
_SPACE = re.compile(r"\s+")


def clean_text(text: str) -> str:
    text = _URL.sub(" ", text)
    text = _MENTION.sub(" ", text)
    return _SPACE.sub(" ", text).strip()


def is_suitable(thread: EmbeddedThread, min_posts: int = 10) -> bool:
    """At least ``min_posts`` posts and strictly more than half non-empty once cleaned."""
    n = thread.size
    nonempty = sum(1 for p in thread.posts if p.clean_text)
    return n >= min_posts and 2 * nonempty > n


# --------------------------------------------------------------------------
# canonical ordering
# --------------------------------------------------------------------------

def _sort_key(p: Post):
    return (p.timestamp is None, p.timestamp or 0, p.id)


def build_thread(
    thread_id: str,
    event: str,
    raw_posts: Sequence[Mapping],
    source_id: str,
    label: VeracityLabel | None = None,
) -> EmbeddedThread:
    """Assemble a thread in canonical order from raw ``{id, text, parent_id, timestamp}`` dicts.

    Replies whose parent is unknown, and replies unreachable from the source
    (reply cycles), are reattached to the source with a warning.
    """
    warnings: list[str] = []
    by_id: dict[str, Mapping] = {}
    for rp in raw_posts:
        pid = str(rp["id"])
        if pid in by_id:
            raise IngestError(f"thread {thread_id}: duplicate post id {pid}")
        by_id[pid] = rp
    if source_id not in by_id:
        raise IngestError(f"thread {thread_id}: source post {source_id} missing")

    parents: dict[str, str | None] = {}
    for pid, rp in by_id.items():
        parent = rp.get("parent_id")
        parent = None if parent is None else str(parent)
        if pid == source_id:
            parents[pid] = None
        elif parent is None or parent not in by_id or parent == pid:
            warnings.append(f"post {pid}: parent {parent} not found, reattached to source")
            parents[pid] = source_id
        else:
            parents[pid] = parent

    def make(pid: str, parent: str | None) -> Post:
        rp = by_id[pid]
        text = rp.get("text") or ""
        ts = rp.get("timestamp")
        return Post(
            id=pid, text=text, clean_text=clean_text(text), parent_id=parent,
            timestamp=None if ts is None else int(ts), is_source=pid == source_id,
        )

    children: dict[str, list[Post]] = {pid: [] for pid in by_id}
    posts = {pid: make(pid, parents[pid]) for pid in by_id}
    for pid, parent in parents.items():
        if parent is not None:
            children[parent].append(posts[pid])

    def walk() -> list[Post]:
        out, seen = [], set()
        stack = [posts[source_id]]
        while stack:
            p = stack.pop()
            if p.id in seen:
                continue
            seen.add(p.id)
            out.append(p)
            stack.extend(sorted(children[p.id], key=_sort_key, reverse=True))
        return out

    ordered = walk()
    if len(ordered) < len(posts):
        seen = {p.id for p in ordered}
        for pid in sorted(set(posts) - seen):
            warnings.append(f"post {pid}: unreachable from source (reply cycle), reattached to source")
            children[parents[pid]].remove(posts[pid])
            posts[pid] = replace(posts[pid], parent_id=source_id)
            parents[pid] = source_id
            children[source_id].append(posts[pid])
        ordered = walk()

    for w in warnings:
        log.warning("thread %s: %s", thread_id, w)
    return EmbeddedThread(thread_id, event, ordered, gold_label=label, warnings=warnings)


# --------------------------------------------------------------------------
# PHEME directory layout
# --------------------------------------------------------------------------

# (misinformation, true) -> label; the usual PHEME conversion
DEFAULT_LABEL_TABLE: dict[tuple[int | None, int | None], VeracityLabel | None] = {
    (0, 0): VeracityLabel.UNVERIFIED,
    (0, 1): VeracityLabel.TRUE,
    (1, 0): VeracityLabel.FALSE,
    (1, 1): None,
    (0, None): VeracityLabel.UNVERIFIED,
    (1, None): VeracityLabel.FALSE,
    (None, 0): VeracityLabel.UNVERIFIED,
    (None, 1): VeracityLabel.TRUE,
    (None, None): None,
}


def _flag(v) -> int | None:
    if v is None:
        return None
    try:
        return int(v)
    except (TypeError, ValueError):
        return None


def map_annotation(annotation: Mapping, table: Mapping | None = None) -> VeracityLabel | None:
    """Veracity label from a PHEME ``annotation.json`` object.

    An explicit ``veracity``/``label`` string field wins; otherwise the
    ``misinformation``/``true`` flags are looked up in ``table``.
    """
    for key in ("veracity", "label"):
        v = annotation.get(key)
        if isinstance(v, str) and v.lower() in {l.value for l in VeracityLabel}:
            return VeracityLabel(v.lower())
    table = DEFAULT_LABEL_TABLE if table is None else table
    key = (_flag(annotation.get("misinformation")), _flag(annotation.get("true")))
    return table.get(key)


def _timestamp(tweet: Mapping) -> int | None:
    ts = tweet.get("timestamp")
    if ts is not None:
        return int(ts)
    created = tweet.get("created_at")
    if isinstance(created, str):
        try:
            return int(datetime.strptime(created, "%a %b %d %H:%M:%S %z %Y").timestamp())
        except ValueError:
            return None
    return None


def _tweet_to_raw(tweet: Mapping, fallback_id: str) -> dict:
    pid = tweet.get("id_str") or tweet.get("id") or fallback_id
    parent = tweet.get("in_reply_to_status_id_str")
    if parent is None and tweet.get("in_reply_to_status_id") is not None:
        parent = tweet["in_reply_to_status_id"]
    if parent is None:
        parent = tweet.get("parent_id")
    return {
        "id": str(pid),
        "text": tweet.get("text") or tweet.get("full_text") or "",
        "parent_id": None if parent is None else str(parent),
        "timestamp": _timestamp(tweet),
    }


def _thread_dirs(event_dir: Path) -> Iterable[Path]:
    # PHEME releases may nest threads under rumours/ and non-rumours/
    for d in sorted(p for p in event_dir.iterdir() if p.is_dir()):
        if d.name in ("rumours", "non-rumours"):
            yield from sorted(p for p in d.iterdir() if p.is_dir())
        else:
            yield d


@dataclass
class ParseReport:
    threads: list[EmbeddedThread]
    warnings: list[str] = field(default_factory=list)


def parse_pheme_dir(path: str | Path, label_table: Mapping | None = None) -> ParseReport:
    """Parse ``event/thread-id/{source-tweet(s)/, reactions/, annotation.json}``."""
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    threads: list[EmbeddedThread] = []
    warnings: list[str] = []
    for event_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for tdir in _thread_dirs(event_dir):
            try:
                threads.append(_parse_thread_dir(tdir, event_dir.name, label_table))
            except (IngestError, json.JSONDecodeError, OSError, UnicodeDecodeError) as exc:
                msg = f"{event_dir.name}/{tdir.name}: skipped ({exc})"
                log.warning(msg)
                warnings.append(msg)
    for t in threads:
        warnings.extend(f"{t.event}/{t.thread_id}: {w}" for w in t.warnings)
    return ParseReport(threads, warnings)


def _parse_thread_dir(tdir: Path, event: str, label_table) -> EmbeddedThread:
    src_dir = next((tdir / n for n in ("source-tweet", "source-tweets") if (tdir / n).is_dir()), None)
    src_files = sorted(src_dir.glob("*.json")) if src_dir else []
    if not src_files:
        raise IngestError("missing source post")
    source = _tweet_to_raw(json.loads(src_files[0].read_text(encoding="utf-8")), src_files[0].stem)
    source["parent_id"] = None
    raw = [source]
    react_dir = tdir / "reactions"
    if react_dir.is_dir():
        for f in sorted(react_dir.glob("*.json")):
            r = _tweet_to_raw(json.loads(f.read_text(encoding="utf-8")), f.stem)
            if r["id"] != source["id"]:
                raw.append(r)
    label = None
    ann = tdir / "annotation.json"
    if ann.is_file():
        label = map_annotation(json.loads(ann.read_text(encoding="utf-8")), label_table)
    return build_thread(tdir.name, event, raw, source["id"], label)


# --------------------------------------------------------------------------
# JSONL
# --------------------------------------------------------------------------

def thread_from_dict(obj: Mapping, where: str = "") -> EmbeddedThread:
    for key in ("thread_id", "event", "posts"):
        if key not in obj:
            raise IngestError(f"{where}missing field {key!r}")
    posts = obj["posts"]
    if not isinstance(posts, list) or not posts:
        raise IngestError(f"{where}'posts' must be a non-empty list")
    sources = [p for p in posts if p.get("parent_id") is None]
    if obj.get("source_id") is not None:
        source_id = str(obj["source_id"])
    elif len(sources) == 1:
        source_id = str(sources[0]["id"])
    else:
        source_id = str(posts[0]["id"])
    label = obj.get("label")
    try:
        label = VeracityLabel(label) if label is not None else None
    except ValueError:
        raise IngestError(f"{where}unknown label {label!r}") from None
    try:
        thread = build_thread(str(obj["thread_id"]), str(obj["event"]), posts, source_id, label)
    except (KeyError, TypeError) as exc:
        raise IngestError(f"{where}bad post record ({exc})") from None

    if "embeddings" in obj or "stance" in obj:
        # inline feature rows follow the canonical order of the stored posts
        stored = [str(p["id"]) for p in posts]
        order = [stored.index(p.id) for p in thread.posts]
        emb = np.asarray(obj["embeddings"], dtype=np.float64)[order]
        stance = np.asarray(obj["stance"], dtype=np.float64)[order]
        thread.embeddings, thread.stance = _check_matrix(emb, thread, "embeddings"), _check_matrix(stance, thread, "stance")
    return thread


def _check_matrix(m: np.ndarray, thread: EmbeddedThread, what: str) -> np.ndarray:
    if m.ndim != 2 or m.shape[0] != thread.size:
        raise IngestError(f"thread {thread.thread_id}: {what} shape {m.shape} vs {thread.size} posts")
    if not np.all(np.isfinite(m)):
        raise IngestError(f"thread {thread.thread_id}: non-finite {what}")
    return m


def parse_jsonl(lines: Iterable[str]) -> list[EmbeddedThread]:
    threads, seen = [], set()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise IngestError(f"line {lineno}: expected a JSON object")
        thread = thread_from_dict(obj, where=f"line {lineno}: ")
        if thread.thread_id in seen:
            raise IngestError(f"line {lineno}: duplicate thread_id {thread.thread_id!r}")
        seen.add(thread.thread_id)
        threads.append(thread)
    _check_uniform(threads)
    return threads


def _check_uniform(threads: Sequence[EmbeddedThread]) -> None:
    dims = {t.embeddings.shape[1] for t in threads if t.embeddings is not None}
    if len(dims) > 1:
        raise IngestError(f"embedding dimension differs across threads: {sorted(dims)}")


def write_jsonl(threads: Iterable[EmbeddedThread]) -> str:
    return "".join(t.dumps() + "\n" for t in threads)


# --------------------------------------------------------------------------
# feature sidecars
# --------------------------------------------------------------------------

def load_sidecar(path: str | Path) -> dict[str, list[float]]:
    """Read ``{"format_version": 1, "vectors": {post_id: [...]}}`` (a bare mapping is accepted too)."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if "vectors" in obj:
        version = obj.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise IngestError(f"{path}: unsupported sidecar format_version {version}")
        obj = obj["vectors"]
    return obj


def _lookup(sidecar: Mapping, thread: EmbeddedThread, pid: str):
    # "thread_id/post_id" keys disambiguate ids reused across threads
    return sidecar.get(f"{thread.thread_id}/{pid}", sidecar.get(pid))


def _matrix(thread: EmbeddedThread, sidecar: Mapping, what: str) -> np.ndarray:
    rows = [_lookup(sidecar, thread, p.id) for p in thread.posts]
    missing = [p.id for p, r in zip(thread.posts, rows) if r is None]
    if missing:
        raise IngestError(f"thread {thread.thread_id}: no {what} vector for post ids {missing}")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise IngestError(f"thread {thread.thread_id}: ragged {what} dimensions {sorted(dims)}")
    return _check_matrix(np.asarray(rows, dtype=np.float64), thread, what)


def attach_features(
    thread: EmbeddedThread,
    embedding_sidecar: Mapping[str, Sequence[float]],
    stance_sidecar: Mapping[str, Sequence[float]],
) -> EmbeddedThread:
    return replace(
        thread,
        embeddings=_matrix(thread, embedding_sidecar, "embedding"),
        stance=_matrix(thread, stance_sidecar, "stance"),
        warnings=list(thread.warnings),
    )
