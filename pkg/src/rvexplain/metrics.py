"""Classification and agreement statistics, plus the explanation accounting report."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

REPORT_SCHEMA_VERSION = 1

CATEGORIES = ("uninformative", "unfaithful", "faithful")


class MetricsError(ValueError):
    pass


def macro_f1(predictions: Sequence[Hashable], golds: Sequence[Hashable],
             labels: Sequence[Hashable] | None = None) -> float:
    """Unweighted mean of per-class F1.

    Classes from ``labels`` that occur in neither list are skipped.  A class
    with no true positives scores 0.
    """
    if len(predictions) != len(golds):
        raise MetricsError(f"length mismatch: {len(predictions)} predictions, {len(golds)} golds")
    if not golds:
        raise MetricsError("no items")
    present = set(predictions) | set(golds)
    classes = [c for c in (labels if labels is not None else sorted(present)) if c in present]
    scores = []
    for c in classes:
        tp = sum(1 for p, g in zip(predictions, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(predictions, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(predictions, golds) if p != c and g == c)
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def pairwise_agreement(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    if len(a) != len(b):
        raise MetricsError("rating lists differ in length")
    if not a:
        raise MetricsError("no items")
    return 100.0 * sum(x == y for x, y in zip(a, b)) / len(a)


def rating_counts(matrix: Sequence[Sequence[Hashable]], labels: Sequence[Hashable] | None = None) -> np.ndarray:
    """items x raters labels -> items x categories count table."""
    rows = [list(r) for r in matrix]
    if not rows:
        raise MetricsError("empty rating matrix")
    labels = list(labels) if labels is not None else sorted({x for r in rows for x in r}, key=str)
    pos = {l: j for j, l in enumerate(labels)}
    counts = np.zeros((len(rows), len(labels)), dtype=np.int64)
    for i, r in enumerate(rows):
        for x in r:
            if x not in pos:
                raise MetricsError(f"label {x!r} outside the label set")
            counts[i, pos[x]] += 1
    return counts


def fleiss_kappa(matrix: Sequence[Sequence[Hashable]], labels: Sequence[Hashable] | None = None) -> float:
    r"""Fleiss' kappa for an items x raters matrix of categorical labels.

    .. math:: \kappa = (\bar P - \bar P_e) / (1 - \bar P_e)
    """
    counts = rating_counts(matrix, labels)
    n = counts.sum(axis=1)
    if len(set(n.tolist())) != 1:
        raise MetricsError("every item needs the same number of ratings")
    n = int(n[0])
    if n < 2:
        raise MetricsError("need at least two raters")
    p_i = ((counts * counts).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = counts.sum(axis=0) / counts.sum()
    p_e = float((p_j * p_j).sum())
    if np.isclose(p_e, 1.0, rtol=0, atol=1e-15):
        # only one label used anywhere: perfect agreement
        return 1.0
    return float((p_bar - p_e) / (1.0 - p_e))


def confusion_matrix(a: Sequence[Hashable], b: Sequence[Hashable], labels: Sequence[Hashable]) -> np.ndarray:
    """Rows are rater ``a``'s labels, columns rater ``b``'s."""
    if len(a) != len(b):
        raise MetricsError("rating lists differ in length")
    pos = {l: j for j, l in enumerate(labels)}
    m = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for x, y in zip(a, b):
        if x not in pos or y not in pos:
            raise MetricsError(f"label outside set: {x!r} / {y!r}")
        m[pos[x], pos[y]] += 1
    return m


# --------------------------------------------------------------------------
# explanation accounting
# --------------------------------------------------------------------------

# row order of the accounting table
REPORT_ROWS = (
    "Important Response (IG)",
    "Important Response (SV)",
    "Similar Response",
    "Summary of I_25 (IG)",
    "Summary of I_25 (SV)",
    "Summary of I_50 (IG)",
    "Summary of I_50 (SV)",
    "Summary of I (IG)",
    "Summary of I (SV)",
    "Out-of-domain Summary",
)


@dataclass
class ReportRow:
    kind: str
    counts: dict[str, int]
    percentages: dict[str, float]
    n: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    dataset_size: int
    notes: list[str] = field(default_factory=list)
    excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "dataset_size": self.dataset_size,
            "excluded_unparseable": self.excluded,
            "rows": [
                {"kind": r.kind, "n": r.n, **{c: r.percentages[c] for c in CATEGORIES},
                 "counts": r.counts}
                for r in self.rows
            ],
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["schema_version", "kind", "n", *CATEGORIES])
        for r in self.rows:
            w.writerow([REPORT_SCHEMA_VERSION, r.kind, r.n, *(f"{r.percentages[c]:.2f}" for c in CATEGORIES)])
        return buf.getvalue()


def build_eval_report(grouped: Mapping[str, Sequence[str | None]]) -> EvalReport:
    """Percentages of (uninformative, unfaithful, faithful) per explanation kind.

    ``grouped`` maps a row label to the category of each verdict; ``None``
    marks an unparseable verdict, which is excluded and counted.
    """
    order = {k: i for i, k in enumerate(REPORT_ROWS)}
    rows, notes, excluded = [], [], 0
    items = set()
    for kind in sorted(grouped, key=lambda k: (order.get(k, len(order)), k)):
        cats = [c for c in grouped[kind] if c is not None]
        excluded += len(grouped[kind]) - len(cats)
        if not cats:
            notes.append(f"{kind}: no verdicts, row omitted")
            continue
        bad = set(cats) - set(CATEGORIES)
        if bad:
            raise MetricsError(f"{kind}: unknown categories {sorted(bad)}")
        counts = Counter(cats)
        n = len(cats)
        rows.append(ReportRow(
            kind=kind,
            counts={c: counts.get(c, 0) for c in CATEGORIES},
            percentages={c: 100.0 * counts.get(c, 0) / n for c in CATEGORIES},
            n=n,
        ))
        items.add(n)
    size = max(items) if items else 0
    return EvalReport(rows, size, notes, excluded)
