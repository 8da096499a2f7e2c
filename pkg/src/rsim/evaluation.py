"""Evaluation protocols over a feature store.

``retrieval``: each held-out image queries the whole store with its own
record excluded. ``matching``: held-out images are scored against the
held-out set only, self-pairs included, so each query's own record is one
of its relevant candidates.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .dataset import index_from_items
from .metrics import P_AT_K, MetricsReport, build_report
from .retrieval import Scorer, rank_all
from .store import FeatureStore
from .training import SplitSpec, split_dataset

PROTOCOLS = ("retrieval", "matching")


@dataclass
class EvalConfig:
    scorer: str = "euclidean"
    protocol: str = "retrieval"
    train_fraction: float = 0.8
    split_seed: int = 0
    queries_per_class: Optional[int] = None  # None: every held-out image
    query_seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if self.queries_per_class is not None and self.queries_per_class < 1:
            raise ValueError("queries_per_class must be >= 1")


def store_split(store: FeatureStore, train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """The same stratified split the training commands use, rebuilt from store order."""
    index = index_from_items(zip(store.ids, store.labels))
    return split_dataset(index, SplitSpec(train_fraction, seed))


def select_queries(store: FeatureStore, ids: list[str], per_class: Optional[int],
                   seed: int) -> list[str]:
    """Up to ``per_class`` ids per class, seeded, kept in store order."""
    if per_class is None:
        return list(ids)
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for i in ids:
        by_class.setdefault(store.get(i).class_label, []).append(i)
    chosen = set()
    for label in sorted(by_class):
        members = by_class[label]
        take = rng.permutation(len(members))[:per_class]
        chosen.update(members[j] for j in take)
    return [i for i in ids if i in chosen]


def evaluate(store: FeatureStore, scorer: Scorer, config: EvalConfig,
             ks=P_AT_K) -> MetricsReport:
    _, test_ids = store_split(store, config.train_fraction, config.split_seed)
    queries = select_queries(store, test_ids, config.queries_per_class, config.query_seed)
    if config.protocol == "matching":
        database = store.subset(test_ids)
    else:
        database = store
    candidates = database.matrix()
    results = []
    for qid in queries:
        rec = store.get(qid)
        exclude = qid if config.protocol == "retrieval" else None
        ranked = rank_all(rec.features, database, scorer, exclude_id=exclude, query_id=qid,
                          candidates=candidates)
        results.append((qid, rec.class_label, ranked))
    meta = {k: v for k, v in asdict(config).items()}
    meta["database_size"] = len(database)
    return build_report(results, ks=ks, n_retrieved=None, meta=meta)
