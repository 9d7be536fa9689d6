"""Graph rumour verifier: propagation/dispersion branches with stance fusion.

Each branch runs GraphSAGE-style mean aggregation layers followed by
additive graph-attention layers over its directed reply graph.  Node states
are concatenated with a projected stance vector, mean-pooled, and the two
pooled branch vectors are treated as a 2-token sequence for multi-head
self-attention before the 3-way classifier.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .ingest import LABELS, EmbeddedThread, VeracityLabel
from .metrics import confusion_matrix, macro_f1

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
N_CLASSES = 3

# fold order used for Table-2-shaped reports; matched by substring of the event name
CANONICAL_EVENTS = (
    ("F", "ferguson"),
    ("C", "charliehebdo"),
    ("O", "ottawa"),
    ("G", "germanwings"),
    ("S", "sydney"),
)


class VerifierError(ValueError):
    pass


@dataclass(frozen=True)
class GraphPair:
    n_nodes: int
    prop_edges: tuple[tuple[int, int], ...]
    disp_edges: tuple[tuple[int, int], ...]


def build_graphs(thread: EmbeddedThread) -> GraphPair:
    index = {p.id: i for i, p in enumerate(thread.posts)}
    edges = []
    for i, p in enumerate(thread.posts):
        if p.parent_id is None:
            continue
        if p.parent_id not in index:
            raise VerifierError(f"thread {thread.thread_id}: unknown parent {p.parent_id}")
        edges.append((index[p.parent_id], i))
    _check_tree(len(thread.posts), edges, thread.thread_id)
    return GraphPair(len(thread.posts), tuple(edges), tuple((c, p) for p, c in edges))


def _check_tree(n: int, edges: Sequence[tuple[int, int]], tid: str) -> None:
    parent = {}
    for p, c in edges:
        if c in parent or c == 0:
            raise VerifierError(f"thread {tid}: node {c} has more than one parent")
        parent[c] = p
    for start in range(n):
        node, steps = start, 0
        while node in parent:
            node = parent[node]
            steps += 1
            if steps > n:
                raise VerifierError(f"thread {tid}: cyclic reply structure")
        if node != 0:
            raise VerifierError(f"thread {tid}: node {start} not connected to the source")


@dataclass
class ModelConfig:
    embed_dim: int
    stance_dim: int
    hidden_branch: int = 256
    hidden_stance: int = 32
    sage_layers: int = 2
    gat_layers: int = 1
    attention_heads: int = 8
    edge_dropout: float = 0.1
    epochs: int = 300
    lr: float = 1e-5
    batch_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.hidden_branch % self.attention_heads:
            raise VerifierError("hidden_branch must be divisible by attention_heads")
        if not 0.0 <= self.edge_dropout <= 1.0:
            raise VerifierError("edge_dropout must lie in [0, 1]")
        if min(self.embed_dim, self.stance_dim, self.hidden_branch, self.hidden_stance) < 1:
            raise VerifierError("dimensions must be positive")

    @property
    def fused_dim(self) -> int:
        return self.hidden_branch + self.hidden_stance


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes: dict[str, tuple[int, int]] = {}
    h = cfg.hidden_branch
    for branch in ("prop", "disp"):
        d_in = cfg.embed_dim
        for k in range(cfg.sage_layers):
            shapes[f"{branch}.sage{k}.W"] = (d_in, h)
            shapes[f"{branch}.sage{k}.b"] = (1, h)
            d_in = h
        for k in range(cfg.gat_layers):
            shapes[f"{branch}.gat{k}.W"] = (d_in, h)
            shapes[f"{branch}.gat{k}.a_src"] = (h, 1)
            shapes[f"{branch}.gat{k}.a_dst"] = (h, 1)
            shapes[f"{branch}.gat{k}.b"] = (1, h)
            d_in = h
    shapes["stance.W"] = (cfg.stance_dim, cfg.hidden_stance)
    shapes["stance.b"] = (1, cfg.hidden_stance)
    dk = h // cfg.attention_heads
    for k in range(cfg.attention_heads):
        for proj in ("q", "k", "v"):
            shapes[f"mha.head{k}.W{proj}"] = (cfg.fused_dim, dk)
    shapes["mha.Wo"] = (h, h)
    shapes["mha.bo"] = (1, h)
    shapes["cls.W"] = (2 * h, N_CLASSES)
    shapes["cls.b"] = (1, N_CLASSES)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        weights = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".b") or name.endswith(".bo"):
                weights[name] = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                weights[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, weights)

    def to_json(self) -> str:
        obj = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in sorted(self.weights.items())},
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        obj = json.loads(text)
        if obj.get("format_version") != CHECKPOINT_VERSION:
            raise VerifierError(f"unsupported checkpoint version {obj.get('format_version')}")
        config = ModelConfig(**obj["config"])
        weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                   for k, v in obj["params"].items()}
        expected = param_shapes(config)
        if set(weights) != set(expected) or any(weights[k].shape != s for k, s in expected.items()):
            raise VerifierError("checkpoint parameters do not match its config")
        return cls(config, weights)

    def save(self, path: str | Path) -> None:
        from ._io import atomic_write_text

        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------

def _in_neighbours(n: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    """Per node: itself plus the sources of edges pointing into it."""
    sets = [[i] for i in range(n)]
    for src, dst in edges:
        sets[dst].append(src)
    return sets


def _branch(W: dict[str, dc.Tensor], name: str, cfg: ModelConfig, x: dc.Tensor,
            edges: Sequence[tuple[int, int]]) -> dc.Tensor:
    n = x.shape[0]
    hood = _in_neighbours(n, edges)
    h = x
    for k in range(cfg.sage_layers):
        agg = dc.mean_rows_over_index_sets(h, hood)
        h = dc.relu(dc.add(dc.matmul(agg, W[f"{name}.sage{k}.W"]), W[f"{name}.sage{k}.b"]))
    mask = np.zeros((n, n), dtype=bool)
    for i, s in enumerate(hood):
        mask[i, s] = True
    ones_col = dc.const(np.ones((n, 1)))
    ones_row = dc.const(np.ones((1, n)))
    for k in range(cfg.gat_layers):
        wh = dc.matmul(h, W[f"{name}.gat{k}.W"])
        s_src = dc.matmul(wh, W[f"{name}.gat{k}.a_src"])
        s_dst = dc.matmul(wh, W[f"{name}.gat{k}.a_dst"])
        # score[i, j] = s_dst[i] + s_src[j], restricted to j in hood(i)
        scores = dc.add(dc.matmul(s_dst, ones_row), dc.matmul(ones_col, dc.transpose(s_src)))
        alpha = dc.softmax_rows(dc.leaky_relu(scores), mask)
        h = dc.add(dc.matmul(alpha, wh), W[f"{name}.gat{k}.b"])
    return h


def forward_tensors(
    params: ModelParams,
    graph: GraphPair,
    embeddings: dc.Tensor,
    stance: dc.Tensor,
    train: bool = False,
    rng: np.random.Generator | None = None,
    weights: dict[str, dc.Tensor] | None = None,
) -> dc.Tensor:
    """Logits (``1 x 3``) as a differentiable expression of the given leaves."""
    cfg = params.config
    n = graph.n_nodes
    if embeddings.shape != (n, cfg.embed_dim):
        raise VerifierError(f"embeddings shape {embeddings.shape}, expected {(n, cfg.embed_dim)}")
    if stance.shape != (n, cfg.stance_dim):
        raise VerifierError(f"stance shape {stance.shape}, expected {(n, cfg.stance_dim)}")
    W = weights if weights is not None else {k: dc.const(v) for k, v in params.weights.items()}

    prop, disp = list(graph.prop_edges), list(graph.disp_edges)
    if train and cfg.edge_dropout > 0:
        if rng is None:
            raise VerifierError("train mode needs an rng for edge dropout")
        keep = dc.sample_edge_mask(len(prop), cfg.edge_dropout, rng)
        prop = dc.apply_edge_mask(prop, keep)
        disp = dc.apply_edge_mask(disp, dc.sample_edge_mask(len(disp), cfg.edge_dropout, rng))

    st = dc.relu(dc.add(dc.matmul(stance, W["stance.W"]), W["stance.b"]))
    everyone = [list(range(n))]
    pooled = []
    for name, edges in (("prop", prop), ("disp", disp)):
        h = _branch(W, name, cfg, embeddings, edges)
        fused = dc.concat_cols([h, st])
        pooled.append(dc.mean_rows_over_index_sets(fused, everyone))
    tokens = dc.concat_cols([dc.transpose(pooled[0]), dc.transpose(pooled[1])])
    tokens = dc.transpose(tokens)  # 2 x fused_dim

    dk = cfg.hidden_branch // cfg.attention_heads
    heads = []
    for k in range(cfg.attention_heads):
        q = dc.matmul(tokens, W[f"mha.head{k}.Wq"])
        key = dc.matmul(tokens, W[f"mha.head{k}.Wk"])
        v = dc.matmul(tokens, W[f"mha.head{k}.Wv"])
        att = dc.softmax_rows(dc.scale(dc.matmul(q, dc.transpose(key)), 1.0 / math.sqrt(dk)))
        heads.append(dc.matmul(att, v))
    attended = dc.add(dc.matmul(dc.concat_cols(heads), W["mha.Wo"]), W["mha.bo"])
    flat = dc.concat_cols([dc.gather_rows(attended, [0]), dc.gather_rows(attended, [1])])
    return dc.add(dc.matmul(flat, W["cls.W"]), W["cls.b"])


def forward(
    params: ModelParams,
    graph: GraphPair,
    embeddings: np.ndarray,
    stance: np.ndarray,
    mode: str = "infer",
    seed: int | None = None,
) -> np.ndarray:
    """Logits as a length-3 array."""
    if mode not in ("infer", "train"):
        raise VerifierError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed) if mode == "train" else None
    out = forward_tensors(params, graph, dc.const(embeddings), dc.const(stance),
                          train=mode == "train", rng=rng)
    return out.value[0].copy()


def model_function(params: ModelParams, graph: GraphPair) -> Callable[[dc.Tensor, dc.Tensor], dc.Tensor]:
    """Closure ``(embeddings, stance) -> logits`` in infer mode, for attribution."""
    return lambda emb, stance: forward_tensors(params, graph, emb, stance)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def predict(params: ModelParams, thread: EmbeddedThread) -> tuple[VeracityLabel, np.ndarray]:
    _need_features(thread)
    logits = forward(params, build_graphs(thread), thread.embeddings, thread.stance)
    probs = softmax(logits)
    return LABELS[int(np.argmax(probs))], probs


def _need_features(thread: EmbeddedThread) -> None:
    if not thread.has_features:
        raise VerifierError(f"thread {thread.thread_id} has no features attached")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def loss_and_grads(
    params: ModelParams, graph: GraphPair, embeddings: np.ndarray, stance: np.ndarray,
    target: int, train: bool = False, rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    leaves = {k: dc.param(v, name=k) for k, v in params.weights.items()}
    logits = forward_tensors(params, graph, dc.const(embeddings), dc.const(stance),
                             train=train, rng=rng, weights=leaves)
    loss = dc.cross_entropy_with_logits(logits, target)
    return float(loss.value[0, 0]), dc.leaf_gradients(loss, leaves)


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: list[float] = field(default_factory=list)


def train(dataset: Sequence[EmbeddedThread], config: ModelConfig,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy.  Deterministic for a fixed ``config.seed``."""
    if not dataset:
        raise VerifierError("empty training set")
    for t in dataset:
        if t.gold_label is None:
            raise VerifierError(f"thread {t.thread_id} has no gold label")
        _need_features(t)
    items = [(build_graphs(t), t.embeddings, t.stance, t.gold_label.index) for t in dataset]

    params = ModelParams.init(config)
    state = dc.AdamState(lr=config.lr)
    order_rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2])
    history = []
    weights = params.weights
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(items))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = {k: np.zeros_like(v) for k, v in weights.items()}
            for i in batch:
                g, e, s, y = items[i]
                loss, grads = loss_and_grads(params, g, e, s, y, train=True, rng=drop_rng)
                total += loss
                for k in acc:
                    acc[k] += grads[k]
            acc = {k: v / len(batch) for k, v in acc.items()}
            weights, state = dc.adam_step(weights, acc, state)
            params = ModelParams(config, weights)
        history.append(total / len(items))
        if on_epoch:
            on_epoch(epoch, history[-1])
    return TrainResult(params, history)


def accuracy(params: ModelParams, dataset: Sequence[EmbeddedThread]) -> float:
    hits = sum(predict(params, t)[0] == t.gold_label for t in dataset)
    return hits / len(dataset)


# --------------------------------------------------------------------------
# leave-one-event-out evaluation
# --------------------------------------------------------------------------

@dataclass
class FoldResult:
    event: str
    macro_f1: float
    n_test: int
    confusion: list[list[int]]
    predictions: list[str]
    golds: list[str]


@dataclass
class FoldReport:
    folds: list[FoldResult]
    overall_mean: float
    overall_pooled: float
    checkpoints: dict[str, str] = field(default_factory=dict)

    def ordered(self) -> list[FoldResult]:
        return sorted(self.folds, key=lambda f: event_sort_key(f.event))

    def table(self) -> dict[str, float]:
        row = {}
        for f in self.ordered():
            row[event_abbrev(f.event)] = f.macro_f1
        row["overall_mean"] = self.overall_mean
        row["overall_pooled"] = self.overall_pooled
        return row

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "folds": [asdict(f) for f in self.ordered()],
            "overall_mean": self.overall_mean,
            "overall_pooled": self.overall_pooled,
            "table": self.table(),
            "checkpoints": dict(sorted(self.checkpoints.items())),
        }


def event_abbrev(event: str) -> str:
    key = event.lower().replace("-", "").replace("_", "")
    for abbrev, stem in CANONICAL_EVENTS:
        if stem in key:
            return abbrev
    return event


def event_sort_key(event: str):
    abbrev = event_abbrev(event)
    names = [a for a, _ in CANONICAL_EVENTS]
    return (names.index(abbrev), event) if abbrev in names else (len(names), event)


def _run_fold(args):
    event, train_set, test_set, config = args
    result = train(train_set, config)
    preds = [predict(result.params, t)[0].value for t in test_set]
    golds = [t.gold_label.value for t in test_set]
    labels = [l.value for l in LABELS]
    fold = FoldResult(
        event=event,
        macro_f1=macro_f1(preds, golds, labels),
        n_test=len(test_set),
        confusion=confusion_matrix(golds, preds, labels).tolist(),
        predictions=preds,
        golds=golds,
    )
    return fold, result.params


def loco_cv(
    dataset: Sequence[EmbeddedThread],
    config: ModelConfig,
    n_jobs: int = 1,
    on_fold: Callable[[FoldResult, ModelParams], None] | None = None,
) -> FoldReport:
    """Train on all events but one, test on the held-out event, for every event."""
    events = sorted({t.event for t in dataset}, key=event_sort_key)
    if len(events) < 2:
        raise VerifierError("leave-one-event-out needs at least two events")
    jobs = [(ev, [t for t in dataset if t.event != ev], [t for t in dataset if t.event == ev], config)
            for ev in events]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_run_fold, jobs))
    else:
        results = [_run_fold(j) for j in jobs]
    folds = []
    for fold, fparams in results:
        log.info("fold %s: macro-F1 %.3f on %d threads", fold.event, fold.macro_f1, fold.n_test)
        folds.append(fold)
        if on_fold:
            on_fold(fold, fparams)
    labels = [l.value for l in LABELS]
    pooled = macro_f1([p for f in folds for p in f.predictions], [g for f in folds for g in f.golds], labels)
    mean = float(np.mean([f.macro_f1 for f in folds]))
    return FoldReport(folds, mean, pooled)
