"""Scoring a query against the feature store and ranking the results."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .network import Discriminator, match_probabilities
from .store import FeatureStore

HIGHER_IS_BETTER = {"discriminator": True, "cosine": True, "manhattan": False, "euclidean": False}
SCORER_KINDS = tuple(HIGHER_IS_BETTER)


class ZeroVectorError(ValueError):
    pass


@dataclass
class Scorer:
    kind: str
    discriminator: Optional[Discriminator] = None

    def __post_init__(self):
        if self.kind not in HIGHER_IS_BETTER:
            raise ValueError(f"unknown scorer {self.kind!r}; choose from {SCORER_KINDS}")
        if self.kind == "discriminator" and self.discriminator is None:
            raise ValueError("discriminator scorer needs a trained discriminator")

    @property
    def higher_is_better(self) -> bool:
        return HIGHER_IS_BETTER[self.kind]

    def score_many(self, query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        """Score ``query`` against each row of ``candidates`` ``[n, *shape]``."""
        if candidates.shape[1:] != query.shape:
            raise ValueError(f"query shape {query.shape} != store shape {candidates.shape[1:]}")
        if self.kind == "discriminator":
            return match_probabilities(query, candidates, self.discriminator)
        q = query.reshape(-1).astype(np.float64)
        c = candidates.reshape(len(candidates), -1).astype(np.float64)
        if self.kind == "manhattan":
            return np.abs(c - q).sum(axis=1)
        if self.kind == "euclidean":
            return np.sqrt(((c - q) ** 2).sum(axis=1))
        qn = np.linalg.norm(q)
        cn = np.linalg.norm(c, axis=1)
        if qn == 0 or np.any(cn == 0):
            raise ZeroVectorError("cosine similarity is undefined for a zero vector")
        return np.clip((c @ q) / (cn * qn), -1.0, 1.0)


def distance(kind: str, xq: np.ndarray, xm: np.ndarray) -> float:
    """Pairwise manhattan / euclidean distance or cosine similarity."""
    xq, xm = np.asarray(xq, dtype=np.float64), np.asarray(xm, dtype=np.float64)
    if xq.shape != xm.shape:
        raise ValueError(f"shape mismatch {xq.shape} vs {xm.shape}")
    if kind == "discriminator":
        raise ValueError("use discriminate() for the learned scorer")
    return float(Scorer(kind).score_many(xq, xm[None])[0])


@dataclass(frozen=True)
class RankedEntry:
    image_id: str
    class_label: str
    score: float
    rank: int


@dataclass
class RankedList:
    query_id: Optional[str]
    entries: list[RankedEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def labels(self) -> list[str]:
        return [e.class_label for e in self.entries]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank", "image_id", "class_label", "score"])
            for e in self.entries:
                w.writerow([e.rank, e.image_id, e.class_label, repr(e.score)])


def order_scores(scores: np.ndarray, higher_is_better: bool) -> np.ndarray:
    """Stable ordering: ties keep stored order."""
    key = -scores if higher_is_better else scores
    return np.argsort(key, kind="stable")


def rank_all(query: np.ndarray, store: FeatureStore, scorer: Scorer,
             exclude_id: Optional[str] = None, query_id: Optional[str] = None,
             candidates: Optional[np.ndarray] = None) -> RankedList:
    """Score every record but ``exclude_id`` and sort by the scorer's orientation.

    ``candidates`` may pass a precomputed ``store.matrix()`` to avoid restacking
    the store for every query.
    """
    if len(store) == 0:
        raise ValueError("cannot rank against an empty store")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != store.feature_shape:
        raise ValueError(f"query shape {query.shape} != store shape {store.feature_shape}")
    mat = store.matrix() if candidates is None else candidates
    keep = np.array([r.image_id != exclude_id for r in store.records])
    recs = [r for r, k in zip(store.records, keep) if k]
    scores = scorer.score_many(query, mat[keep])
    order = order_scores(scores, scorer.higher_is_better)
    entries = [RankedEntry(recs[i].image_id, recs[i].class_label, float(scores[i]), rank)
               for rank, i in enumerate(order, start=1)]
    return RankedList(query_id if query_id is not None else exclude_id, entries)


def top_n(ranked: RankedList, n: int) -> RankedList:
    if n < 0:
        raise ValueError("n must be >= 0")
    return RankedList(ranked.query_id, ranked.entries[:n])
