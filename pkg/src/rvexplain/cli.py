"""Staged pipeline: ingest -> train -> explain -> evaluate -> report.

Each stage reads and writes files under one run directory, so stages can be
rerun or resumed independently.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import attribution as attr
from . import explainers as ex
from . import llm_eval
from ._io import atomic_write_json, atomic_write_text, read_json
from .ingest import (IngestError, attach_features, is_suitable, load_sidecar, parse_jsonl,
                     parse_pheme_dir, write_jsonl)
from .metrics import build_eval_report
from .verifier import ModelConfig, ModelParams, loco_cv, predict, train

log = logging.getLogger("rvexplain")

STORE = "threads.jsonl"


@dataclass
class DataConfig:
    pheme_dir: str | None = None
    jsonl: str | None = None
    embeddings: str | None = None
    stance: str | None = None


@dataclass
class AttributionConfig:
    methods: list[str] = field(default_factory=lambda: ["IG", "SV"])
    ig_steps: int = 512
    sv_permutations: int = 2000
    sv_mode: str = "sampling"  # or "exact"
    seed: int = 0
    suitable_only: bool = True


@dataclass
class ExplanationConfig:
    ks: list[int] = field(default_factory=lambda: [25, 50, 100])
    summarizer: dict = field(default_factory=dict)
    generic_summarizer: dict = field(default_factory=lambda: {"flavor": "generic"})


@dataclass
class EvaluatorConfig:
    backend: str = "stub"  # or "chat"
    model: str = "gpt-3.5-turbo-0301"
    base_url: str = "https://api.openai.com/v1"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    runs: int = 1
    max_workers: int = 4
    max_tokens: int = 16
    probe: bool = False
    probe_temperatures: list[float] = field(default_factory=lambda: list(llm_eval.DEFAULT_TEMPERATURES))
    probe_runs: int = 3
    probe_items: int = 10


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides; dims are inferred
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    explanation: ExplanationConfig = field(default_factory=ExplanationConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)
    train_final: bool = True
    fold_jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        sections = {"data": DataConfig, "attribution": AttributionConfig,
                    "explanation": ExplanationConfig, "evaluator": EvaluatorConfig}
        kwargs = {}
        for k, v in d.items():
            if k in sections:
                kwargs[k] = sections[k](**v)
            elif k in {f.name for f in dataclasses.fields(cls)}:
                kwargs[k] = v
            else:
                raise ValueError(f"unknown config key {k!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# run directory helpers
# --------------------------------------------------------------------------

def _load_config(args) -> PipelineConfig:
    run = Path(args.run)
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_dict(read_json(args.config))
    elif (run / "config.json").is_file():
        cfg = PipelineConfig.from_dict(read_json(run / "config.json"))
    else:
        cfg = PipelineConfig()
    return cfg


def _save_config(run: Path, cfg: PipelineConfig) -> None:
    atomic_write_json(run / "config.json", cfg.to_dict())


def _setup_logging(run: Path, stage: str, verbose: bool) -> None:
    (run / "logs").mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for h in list(root.handlers):
        if getattr(h, "_rvexplain", False):
            root.removeHandler(h)
    fh = logging.FileHandler(run / "logs" / f"{stage}.log", encoding="utf-8")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    sh = logging.StreamHandler(sys.stderr)
    sh.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    for h in (fh, sh):
        h._rvexplain = True
        root.addHandler(h)


def _store(run: Path):
    path = run / STORE
    if not path.is_file():
        raise SystemExit(f"{path} not found; run `rvexplain ingest` first")
    with path.open(encoding="utf-8") as fh:
        return parse_jsonl(fh)


def _model_config(cfg: PipelineConfig, threads) -> ModelConfig:
    t = next(t for t in threads if t.has_features)
    return ModelConfig(embed_dim=t.embeddings.shape[1], stance_dim=t.stance.shape[1], **cfg.model)


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args) -> dict:
    run = Path(args.run)
    cfg = _load_config(args)
    for name in ("pheme_dir", "jsonl", "embeddings", "stance"):
        if getattr(args, name, None):
            setattr(cfg.data, name, getattr(args, name))
    _setup_logging(run, "ingest", args.verbose)
    warnings = []
    if cfg.data.pheme_dir:
        parsed = parse_pheme_dir(cfg.data.pheme_dir)
        threads, warnings = parsed.threads, parsed.warnings
    elif cfg.data.jsonl:
        with open(cfg.data.jsonl, encoding="utf-8") as fh:
            threads = parse_jsonl(fh)
        warnings = [f"{t.thread_id}: {w}" for t in threads for w in t.warnings]
    else:
        raise SystemExit("ingest needs --pheme-dir or --jsonl")
    if cfg.data.embeddings or cfg.data.stance:
        if not (cfg.data.embeddings and cfg.data.stance):
            raise SystemExit("--embeddings and --stance sidecars go together")
        emb, st = load_sidecar(cfg.data.embeddings), load_sidecar(cfg.data.stance)
        threads = [attach_features(t, emb, st) for t in threads]
    threads.sort(key=lambda t: (t.event, t.thread_id))
    text = write_jsonl(threads)
    atomic_write_text(run / STORE, text)
    suitable = [t.thread_id for t in threads if is_suitable(t)]
    report = {
        "schema_version": 1,
        "threads": len(threads),
        "suitable": len(suitable),
        "unsuitable": len(threads) - len(suitable),
        "suitable_ids": suitable,
        "store_sha256": _sha(text),
        "warnings": warnings,
    }
    atomic_write_json(run / "suitability.json", report)
    _save_config(run, cfg)
    print(f"ingested {len(threads)} threads; suitable {len(suitable)}/{len(threads)}")
    return report


def cmd_train(args) -> dict:
    run = Path(args.run)
    cfg = _load_config(args)
    _setup_logging(run, "train", args.verbose)
    threads = _store(run)
    labelled = [t for t in threads if t.gold_label is not None and t.has_features]
    mcfg = _model_config(cfg, labelled)
    ckdir = run / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    out = {}
    if len({t.event for t in labelled}) >= 2:
        paths = {}

        def on_fold(fold, params):
            p = ckdir / f"fold_{fold.event}.json"
            params.save(p)
            paths[fold.event] = str(p.relative_to(run))

        report = loco_cv(labelled, mcfg, n_jobs=cfg.fold_jobs, on_fold=on_fold)
        report.checkpoints = paths
        atomic_write_json(run / "fold_report.json", report.to_dict())
        out["fold_report"] = report.to_dict()
        print("fold macro-F1: " + ", ".join(f"{k}={v:.3f}" for k, v in report.table().items()))
    else:
        log.warning("fewer than two events; skipping leave-one-event-out evaluation")
    if cfg.train_final:
        result = train(labelled, mcfg, on_epoch=lambda e, l: log.debug("epoch %d loss %.6f", e, l))
        result.params.save(ckdir / "model.json")
        atomic_write_json(run / "loss_history.json", result.loss_history)
        out["checkpoint"] = str(ckdir / "model.json")
        print(f"final model written to {ckdir / 'model.json'}")
    _save_config(run, cfg)
    return out


def _attribute(params, thread, method, acfg: AttributionConfig):
    if method == attr.IG:
        return attr.integrated_gradients(params, thread, steps=acfg.ig_steps)
    if method == attr.SV:
        if acfg.sv_mode == "exact":
            return attr.shapley_exact(params, thread)
        return attr.shapley_sampling(params, thread, permutations=acfg.sv_permutations, seed=acfg.seed)
    raise ValueError(f"unknown attribution method {method!r}")


def cmd_explain(args) -> dict:
    run = Path(args.run)
    cfg = _load_config(args)
    _setup_logging(run, "explain", args.verbose)
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else run / "checkpoints" / "model.json"
    params = ModelParams.load(ckpt)
    checksum = params.checksum()
    threads = [t for t in _store(run) if t.has_features]
    if cfg.attribution.suitable_only:
        threads = [t for t in threads if is_suitable(t)]
    spec = ex.SummarizerSpec(**{"flavor": ex.OPINION, **cfg.explanation.summarizer})
    gspec = ex.SummarizerSpec(**{"flavor": ex.GENERIC, **cfg.explanation.generic_summarizer})
    service = ex.make_summarizer(spec)
    gservice = service if gspec.endpoint == spec.endpoint else ex.make_summarizer(gspec)
    adir, cdir = run / "attributions", run / "candidates"
    done = skipped = 0
    errors = {}
    for t in threads:
        cpath = cdir / f"{t.thread_id}.json"
        if cpath.is_file() and read_json(cpath).get("model_checksum") == checksum:
            skipped += 1
            continue
        results, attr_errors = {}, []
        for method in cfg.attribution.methods:
            apath = adir / f"{t.thread_id}__{method}__{checksum}.json"
            if apath.is_file():
                results[method] = attr.AttributionResult.from_dict(read_json(apath))
                continue
            try:
                res = _attribute(params, t, method, cfg.attribution)
            except attr.AttributionError as exc:
                log.warning("thread %s %s: %s", t.thread_id, method, exc)
                attr_errors.append({"method": method, "error": str(exc)})
                continue
            results[method] = res
            atomic_write_json(apath, {**res.to_dict(), "model_checksum": checksum})
        label, probs = predict(params, t)
        cands = ex.generate_all(t, results, spec, gspec, ks=cfg.explanation.ks,
                                service=service, generic_service=gservice)
        atomic_write_json(cpath, {
            "format_version": 1,
            "thread_id": t.thread_id,
            "event": t.event,
            "claim": t.source.text,
            "model_checksum": checksum,
            "prediction": label.value,
            "probabilities": probs.tolist(),
            "gold_label": t.gold_label.value if t.gold_label else None,
            "candidates": [c.to_dict() for c in cands.candidates],
            "failures": [dataclasses.asdict(f) for f in cands.failures],
            "attribution_errors": attr_errors,
        })
        if attr_errors:
            errors[t.thread_id] = attr_errors
        done += 1
    summary = {"threads": len(threads), "explained": done, "skipped_cached": skipped,
               "summarizer_requests": service.requests + (gservice.requests if gservice is not service else 0),
               "attribution_errors": errors}
    atomic_write_json(run / "explain_summary.json", summary)
    _save_config(run, cfg)
    print(f"explained {done} threads ({skipped} cached)")
    return summary


def make_evaluator(ecfg: EvaluatorConfig):
    if ecfg.backend == "stub":
        return llm_eval.StubEvaluator()
    if ecfg.backend == "chat":
        return llm_eval.ChatCompletionsClient(ecfg.model, base_url=ecfg.base_url,
                                              api_key_env=ecfg.api_key_env, max_tokens=ecfg.max_tokens)
    raise ValueError(f"unknown evaluator backend {ecfg.backend!r}")


def cmd_evaluate(args, client=None) -> dict:
    run = Path(args.run)
    cfg = _load_config(args)
    _setup_logging(run, "evaluate", args.verbose)
    ecfg = cfg.evaluator
    client = client or make_evaluator(ecfg)
    cache = llm_eval.ResponseCache(run / "llm_cache")
    cand_files = sorted((run / "candidates").glob("*.json"))
    if not cand_files:
        raise SystemExit("no candidate files; run `rvexplain explain` first")
    grouped: dict[str, list[str | None]] = {}
    skipped = []
    probe_items = []
    for path in cand_files:
        rec = read_json(path)
        cands = [ex.ExplanationCandidate.from_dict(c) for c in rec["candidates"]]
        usable, prompts = [], []
        for c in cands:
            try:
                prompts.append(llm_eval.render_prompt(rec["claim"], c.text))
                usable.append(c)
            except llm_eval.EvalError as exc:
                skipped.append({"thread_id": rec["thread_id"], "key": c.key, "reason": str(exc)})
        results = llm_eval.query_many(client, prompts, ecfg.temperature, ecfg.runs, cache,
                                      [rec["prediction"]] * len(prompts), ecfg.max_workers)
        out = []
        for c, p, verdicts in zip(usable, prompts, results):
            grouped.setdefault(c.label, []).extend(v.category_vs_prediction for v in verdicts)
            out.append({"key": c.key, "label": c.label, "prompt_hash": p.hash, "flagged": p.flagged,
                        "verdicts": [v.to_dict() for v in verdicts]})
            if len(probe_items) < ecfg.probe_items:
                probe_items.append((p.claim, p.explanation))
        atomic_write_json(run / "verdicts" / path.name, {
            "format_version": 1, "thread_id": rec["thread_id"], "prediction": rec["prediction"],
            "model": client.model_name, "temperature": ecfg.temperature, "results": out,
        })
    report = build_eval_report(grouped)
    report.notes.extend(f"{s['thread_id']}/{s['key']}: {s['reason']}" for s in skipped)
    atomic_write_text(run / "eval_report.json", report.to_json() + "\n")
    atomic_write_text(run / "eval_report.csv", report.to_csv())
    summary = {"report": report.to_dict(), "requests": client.requests}
    if ecfg.probe and probe_items:
        table = llm_eval.consistency_probe(client, probe_items, ecfg.probe_temperatures,
                                           ecfg.probe_runs, cache)
        probe = {"schema_version": 1,
                 "per_temperature": {str(k): v for k, v in table.per_temperature.items()},
                 "overall_label_agreement": table.overall_label_agreement,
                 "letters": {str(k): v for k, v in table.letters.items()}}
        atomic_write_json(run / "consistency.json", probe)
        summary["consistency"] = probe
    summary["requests"] = client.requests
    _save_config(run, cfg)
    print(report.to_csv(), end="")
    print(f"evaluator requests: {client.requests}")
    return summary


def cmd_report(args) -> dict:
    run = Path(args.run)
    cfg = _load_config(args)
    out = {}
    if (run / "fold_report.json").is_file():
        out["folds"] = read_json(run / "fold_report.json")["table"]
    by_method: dict[str, list[attr.AttributionResult]] = {}
    for p in sorted((run / "attributions").glob("*.json")):
        res = attr.AttributionResult.from_dict(read_json(p))
        by_method.setdefault(res.method, []).append(res)
    out["importance_shares"] = {m: {str(k): v for k, v in attr.mean_shares(rs, (25, 50)).items()}
                                for m, rs in sorted(by_method.items())}
    out["runtime_mean_s"] = {m: sum(r.meta.get("elapsed_s", 0.0) for r in rs) / len(rs)
                             for m, rs in sorted(by_method.items())}
    if (run / "eval_report.json").is_file():
        out["eval_report"] = read_json(run / "eval_report.json")["rows"]
    atomic_write_json(run / "summary_report.json", {"schema_version": 1, **out})
    _save_config(run, cfg)
    print(json.dumps(out, indent=2))
    return out


def cmd_synth(args) -> None:
    from .synthetic import separable_threads

    threads = separable_threads(n_threads=args.threads, min_posts=args.min_posts,
                                max_posts=args.max_posts, seed=args.seed,
                                events=tuple(args.events.split(",")))
    atomic_write_text(args.out, write_jsonl(threads))
    print(f"wrote {len(threads)} synthetic threads to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rvexplain", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--config", help="pipeline config JSON (default: the run's config.json)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=fn)
        return p

    p = stage("ingest", cmd_ingest, "parse threads and write the canonical store")
    p.add_argument("--pheme-dir", dest="pheme_dir")
    p.add_argument("--jsonl")
    p.add_argument("--embeddings", help="embedding sidecar JSON")
    p.add_argument("--stance", help="stance sidecar JSON")
    stage("train", cmd_train, "leave-one-event-out evaluation and final model")
    p = stage("explain", cmd_explain, "attributions and explanation candidates")
    p.add_argument("--checkpoint")
    stage("evaluate", cmd_evaluate, "LLM-judge verdicts and the accounting report")
    stage("report", cmd_report, "summarise a run directory")

    p = sub.add_parser("synth", help="write a synthetic JSONL dataset with inline features")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=30)
    p.add_argument("--min-posts", type=int, default=3)
    p.add_argument("--max-posts", type=int, default=8)
    p.add_argument("--events", default="ev_a,ev_b,ev_c")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
