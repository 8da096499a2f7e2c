"""Retrieval quality measures: NMRR/ANMRR, AP/mAP, P@k and class confusion.

ANMRR follows the MPEG-7 definition with ``K(q) = 2 G(q)``; AP divides by
the number of relevant images in the database, so a list that misses
relevant items is penalised.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .retrieval import RankedList, top_n

P_AT_K = (5, 10, 50, 100, 1000)


class EmptyQuerySetError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    relevant: frozenset
    penalty: Optional[float] = None  # K(q); defaults to 2 G(q)

    def __post_init__(self):
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        if not self.relevant:
            raise ValueError("ground truth needs at least one relevant item")

    @property
    def g(self) -> int:
        return len(self.relevant)

    @property
    def k(self) -> float:
        return 2.0 * self.g if self.penalty is None else float(self.penalty)


def truth_for(label: str, ranked_labels: Iterable[tuple[str, str]]) -> GroundTruth:
    """Relevant set = every ``(image_id, label)`` candidate sharing ``label``."""
    return GroundTruth(frozenset(i for i, lab in ranked_labels if lab == label))


def _relevance(ranked: RankedList, truth: GroundTruth) -> np.ndarray:
    return np.fromiter((e.image_id in truth.relevant for e in ranked.entries), dtype=bool,
                       count=len(ranked.entries))


def penalized_ranks(ranked: RankedList, truth: GroundTruth) -> list[float]:
    """1-based positions of the relevant items; beyond K(q) (or absent) becomes 1.25 K(q)."""
    k = truth.k
    positions = (np.flatnonzero(_relevance(ranked, truth)) + 1).astype(float)
    positions = np.where(positions > k, 1.25 * k, positions)
    missing = truth.g - len(positions)
    return list(positions) + [1.25 * k] * missing


def nmrr(ranked: RankedList, truth: GroundTruth) -> float:
    g = truth.g
    mean_rank = float(np.mean(penalized_ranks(ranked, truth)))
    denom = 1.25 * truth.k - 0.5 * (1 + g)
    if denom == 0:
        raise ZeroDivisionError("degenerate NMRR denominator")
    return (mean_rank - 0.5 * (1 + g)) / denom


def anmrr(nmrrs: Sequence[float]) -> float:
    if len(nmrrs) == 0:
        raise EmptyQuerySetError("ANMRR over zero queries")
    return float(np.mean(nmrrs))


def average_precision(ranked: RankedList, truth: GroundTruth) -> float:
    # exact rationals, so the result is the correctly rounded AP
    positions = np.flatnonzero(_relevance(ranked, truth)) + 1
    total = sum((Fraction(hits, int(pos)) for hits, pos in enumerate(positions, start=1)), Fraction(0))
    return float(total / truth.g)


def mean_average_precision(aps: Sequence[float]) -> float:
    if len(aps) == 0:
        raise EmptyQuerySetError("mAP over zero queries")
    return float(np.mean(aps))


def precision_at_k(ranked: RankedList, truth: GroundTruth, k: int) -> float:
    """Percent relevant among the top ``k``; slots past the list end count as misses."""
    if k < 1:
        raise ValueError("k must be >= 1")
    z = _relevance(ranked, truth)[:k]
    return 100.0 * float(z.sum()) / k


def confusion_matrix(results: Sequence[tuple[str, RankedList]], n_retrieved: Optional[int],
                     classes: Optional[Sequence[str]] = None,
                     ) -> tuple[list[str], np.ndarray]:
    """Row-normalised percentage matrix over ``(query_class, ranked)`` results.

    Cell ``(a, b)`` is the mean, over class-``a`` queries, of the share of the
    top ``n_retrieved`` results labelled ``b``. ``n_retrieved=None`` uses the
    number of same-class candidates for each query.
    """
    if classes is None:
        classes = sorted({c for c, _ in results} | {lab for _, r in results for lab in r.labels})
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    sums = np.zeros((len(classes), len(classes)))
    counts = np.zeros(len(classes))
    for qclass, ranked in results:
        n = n_retrieved if n_retrieved is not None else sum(l == qclass for l in ranked.labels)
        head = top_n(ranked, n).labels
        if not head:
            continue
        row = np.zeros(len(classes))
        for lab in head:
            row[pos[lab]] += 1
        sums[pos[qclass]] += 100.0 * row / len(head)
        counts[pos[qclass]] += 1
    empty = [c for c, n in zip(classes, counts) if n == 0]
    if empty:
        raise EmptyQuerySetError(f"classes without queries: {empty}")
    return classes, sums / counts[:, None]


# --------------------------------------------------------------------------
# report


@dataclass
class QueryResult:
    query_id: str
    query_class: str
    nmrr: float
    ap: float
    p_at_k: dict


@dataclass
class MetricsReport:
    queries: list[QueryResult]
    anmrr: float
    map: float  # fraction; rendered as percent
    p_at_k: dict  # k -> percent
    per_class_map: dict  # class -> fraction
    classes: list[str]
    confusion: np.ndarray
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, MetricsReport) and self.to_text() == other.to_text())

    def to_text(self) -> str:
        lines = ["# rsim metrics report"]
        for k, v in sorted(self.meta.items()):
            lines.append(f"{k}: {v}")
        lines += [f"queries: {len(self.queries)}",
                  f"ANMRR: {self.anmrr:.6f}",
                  f"mAP(%): {100 * self.map:.4f}"]
        for k, v in self.p_at_k.items():
            lines.append(f"P@{k}(%): {v:.4f}")
        lines += ["", "[per_class_map]", "class\tmAP(%)"]
        for c, v in self.per_class_map.items():
            lines.append(f"{c}\t{100 * v:.4f}")
        lines += ["", "[confusion]", "\t".join(["query\\retrieved"] + self.classes)]
        for c, row in zip(self.classes, self.confusion):
            lines.append("\t".join([c] + [f"{x:.4f}" for x in row]))
        lines += ["", "[queries]", "query_id\tclass\tNMRR\tAP"]
        for q in self.queries:
            lines.append(f"{q.query_id}\t{q.query_class}\t{q.nmrr:.6f}\t{q.ap:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "report.txt", out / "summary.csv", out / "per_class_map.csv",
                 out / "confusion.csv", out / "queries.csv"]
        paths[0].write_text(self.to_text())
        with open(paths[1], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["metric", "value"])
            w.writerow(["ANMRR", repr(self.anmrr)])
            w.writerow(["mAP", repr(100 * self.map)])
            for k, v in self.p_at_k.items():
                w.writerow([f"P@{k}", repr(v)])
        with open(paths[2], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "mAP"])
            for c, v in self.per_class_map.items():
                w.writerow([c, repr(100 * v)])
        with open(paths[3], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_class"] + self.classes)
            for c, row in zip(self.classes, self.confusion):
                w.writerow([c] + [repr(float(x)) for x in row])
        with open(paths[4], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_id", "class", "NMRR", "AP"] + [f"P@{k}" for k in self.p_at_k])
            for q in self.queries:
                w.writerow([q.query_id, q.query_class, repr(q.nmrr), repr(q.ap)]
                           + [repr(q.p_at_k[k]) for k in self.p_at_k])
        return paths


def build_report(results: Sequence[tuple[str, str, RankedList]], ks: Sequence[int] = P_AT_K,
                 n_retrieved: Optional[int] = None, meta: Optional[dict] = None) -> MetricsReport:
    """Aggregate ``(query_id, query_class, ranked)`` triples.

    Relevance for each query is every ranked candidate sharing its class.
    """
    if not results:
        raise EmptyQuerySetError("no queries to evaluate")
    per_query = []
    for qid, qclass, ranked in results:
        truth = truth_for(qclass, zip(ranked.ids, ranked.labels))
        per_query.append(QueryResult(
            qid, qclass, nmrr(ranked, truth), average_precision(ranked, truth),
            {k: precision_at_k(ranked, truth, k) for k in ks}))
    classes, conf = confusion_matrix([(c, r) for _, c, r in results], n_retrieved)
    per_class = {}
    for c in classes:
        aps = [q.ap for q in per_query if q.query_class == c]
        if aps:
            per_class[c] = mean_average_precision(aps)
    return MetricsReport(
        queries=per_query,
        anmrr=anmrr([q.nmrr for q in per_query]),
        map=mean_average_precision([q.ap for q in per_query]),
        p_at_k={k: float(np.mean([q.p_at_k[k] for q in per_query])) for k in ks},
        per_class_map=per_class,
        classes=classes,
        confusion=conf,
        meta=dict(meta or {}),
    )
