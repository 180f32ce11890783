"""Cross-encoder pseudo-labeling: score margins for (query, positive,
negative) tuples and assemble the training dataset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import ParseError, Passage, Query, passage_text
from .mining import PoolEntry
from .models import CrossEncoderScorer
from .util import derive_seed


@dataclass(frozen=True)
class TrainingTuple:
    query_id: str
    pos_id: str
    neg_id: str
    margin: float

    def __post_init__(self):
        if self.pos_id == self.neg_id:
            raise ValueError(f"pos_id == neg_id ({self.pos_id!r}) for "
                             f"query {self.query_id!r}")
        if not math.isfinite(self.margin):
            raise ValueError(f"non-finite margin for query {self.query_id!r}")


@dataclass
class GPLDataset:
    tuples: list[TrainingTuple]
    manifest: dict = field(default_factory=dict)


def ce_margin(ce: CrossEncoderScorer, query_text: str, pos_text: str,
              neg_text: str) -> float:
    """Teacher margin: score(query, positive) - score(query, negative).

    A negative margin means the cross-encoder prefers the mined "negative",
    i.e. a likely false negative.
    """
    pos_score = ce(query_text, pos_text)
    neg_score = ce(query_text, neg_text)
    if not (math.isfinite(pos_score) and math.isfinite(neg_score)):
        raise ValueError("cross-encoder produced a non-finite score")
    return pos_score - neg_score


def sample_tuple(query: Query, pool: PoolEntry, seed: int) -> tuple[str, str]:
    """Pick (positive, negative) ids for one query.

    The positive is the query's source passage; the negative is drawn
    uniformly from the pool, deterministic per (seed, query id).
    """
    if not pool.usable or not pool.negative_ids:
        raise ValueError(f"query {query.id} has an empty negative pool")
    if query.source_passage_id is None:
        raise ValueError(f"query {query.id} has no source passage")
    rng = np.random.default_rng(derive_seed(seed, "negsample", query.id))
    neg_id = pool.negative_ids[int(rng.integers(len(pool.negative_ids)))]
    return query.source_passage_id, neg_id


def build_dataset(queries: Sequence[Query], pools: Mapping[str, PoolEntry],
                  corpus: Sequence[Passage], ce: CrossEncoderScorer,
                  seed: int) -> GPLDataset:
    """One pseudo-labeled tuple per usable query, ordered by query id.

    Queries whose pool is missing, unusable, or empty are skipped. The
    build is a pure function of (queries, pools, corpus, ce, seed).
    """
    texts = {p.id: passage_text(p) for p in corpus}
    tuples: list[TrainingTuple] = []
    skipped = 0
    for query in sorted(queries, key=lambda q: q.id):
        pool = pools.get(query.id)
        if pool is None or not pool.usable or not pool.negative_ids:
            skipped += 1
            continue
        pos_id, neg_id = sample_tuple(query, pool, seed)
        margin = ce_margin(ce, query.text, texts[pos_id], texts[neg_id])
        tuples.append(TrainingTuple(query.id, pos_id, neg_id, margin))
    retrievers = sorted({name for pool in pools.values()
                         for name in pool.per_retriever})
    manifest = {
        "seed": seed,
        "cross_encoder": ce.name,
        "retrievers": retrievers,
        "n_queries": len(queries),
        "n_tuples": len(tuples),
        "n_skipped": skipped,
    }
    return GPLDataset(tuples, manifest)


def binary_relevance_labels(dataset: GPLDataset) -> list[tuple[str, str, int]]:
    """Companion 0/1 labels over the same tuples: positives 1, negatives 0.

    This is the label set a generation-only baseline would train on; it
    cannot express a false negative, where the margin label is near zero.
    """
    labels: list[tuple[str, str, int]] = []
    for t in dataset.tuples:
        labels.append((t.query_id, t.pos_id, 1))
        labels.append((t.query_id, t.neg_id, 0))
    return labels


def write_dataset(dataset: GPLDataset, path: str | Path) -> None:
    """TSV `qid <TAB> pos <TAB> neg <TAB> margin` with margins at 17
    significant digits (exact float64 round-trip); manifest as a JSON
    sidecar next to the file."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for t in dataset.tuples:
            f.write(f"{t.query_id}\t{t.pos_id}\t{t.neg_id}\t{t.margin:.17g}\n")
    with open(path.with_suffix(path.suffix + ".manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(dataset.manifest, f, sort_keys=True, indent=2)


def read_dataset(path: str | Path) -> GPLDataset:
    path = Path(path)
    tuples: list[TrainingTuple] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 tab-separated fields")
            qid, pos_id, neg_id, margin_str = parts
            try:
                margin = float(margin_str)
            except ValueError as e:
                raise ParseError(f"{path}:{lineno}: bad margin {margin_str!r}") from e
            tuples.append(TrainingTuple(qid, pos_id, neg_id, margin))
    manifest_path = path.with_suffix(path.suffix + ".manifest.json")
    manifest = {}
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as f:
            manifest = json.load(f)
    return GPLDataset(tuples, manifest)
