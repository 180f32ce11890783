"""Synthetic query generation: budget rule, nucleus sampling, decoding loop,
and a deterministic mock generator for desk-scale runs."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Passage, Query, passage_text, tokenize
from .models import QueryGenerator
from .util import derive_seed

logger = logging.getLogger(__name__)

DEFAULT_TOTAL_BUDGET = 250_000
MIN_QUERIES_PER_PASSAGE = 3
PLACEHOLDER_TOKEN = "placeholder"

NOISE_VOCAB = tuple(f"noise{i:03d}" for i in range(200))
EOS_TOKEN = "</s>"


@dataclass(frozen=True)
class SamplerConfig:
    """Nucleus-sampling knobs: temperature, top-k, top-p, seed, length cap."""

    temperature: float = 1.0
    top_k: int = 25
    top_p: float = 0.95
    seed: int = 0
    max_query_len: int = 12

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_query_len < 1:
            raise ValueError("max_query_len must be >= 1")


@dataclass(frozen=True)
class GenerationBudget:
    """How many queries to generate per passage to hit a fixed total.

    In the down-sampling branch the floor division can undershoot the total
    by at most (total_budget mod 3) queries.
    """

    total_budget: int
    qpp: int
    effective_corpus_size: int

    def __post_init__(self):
        if self.qpp < MIN_QUERIES_PER_PASSAGE:
            raise ValueError(f"qpp must be >= {MIN_QUERIES_PER_PASSAGE}")
        if self.effective_corpus_size < 1:
            raise ValueError("effective_corpus_size must be >= 1")
        if self.qpp * self.effective_corpus_size < self.total_budget - 2:
            raise ValueError("qpp x effective_corpus_size falls short of the budget")


def compute_budget(corpus_size: int, total_budget: int = DEFAULT_TOTAL_BUDGET
                   ) -> GenerationBudget:
    """Queries-per-passage rule for a fixed generation total.

    If 3 queries per passage would exceed the total, the corpus is
    down-sampled to floor(total/3) passages and qpp stays at 3; otherwise
    the whole corpus is kept and qpp = ceil(total / corpus_size).
    """
    if corpus_size < 1:
        raise ValueError("corpus_size must be >= 1")
    if total_budget < MIN_QUERIES_PER_PASSAGE:
        raise ValueError(f"total_budget must be >= {MIN_QUERIES_PER_PASSAGE}")
    if MIN_QUERIES_PER_PASSAGE * corpus_size > total_budget:
        effective = total_budget // MIN_QUERIES_PER_PASSAGE
        qpp = MIN_QUERIES_PER_PASSAGE
    else:
        effective = corpus_size
        qpp = math.ceil(total_budget / effective)
    return GenerationBudget(total_budget, qpp, effective)


def nucleus_filter(logits: np.ndarray, cfg: SamplerConfig) -> np.ndarray:
    """Temperature -> softmax -> top-k -> top-p -> renormalized distribution.

    Within the top-k set, the smallest prefix (in descending probability)
    whose cumulative mass reaches top_p survives; if the set's total mass
    stays below top_p, the whole set survives. Ties break by ascending
    token index.
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1 or logits.size == 0:
        raise ValueError("logits must be a non-empty vector")
    if np.isnan(logits).any() or np.isposinf(logits).any():
        raise ValueError("logits must not contain NaN or +inf")
    if np.all(np.isneginf(logits)):
        raise ValueError("all logits are -inf")

    scaled = logits / cfg.temperature
    scaled = scaled - np.max(scaled)
    probs = np.exp(scaled)
    probs /= probs.sum()

    order = np.argsort(-probs, kind="stable")[: cfg.top_k]
    cumulative = np.cumsum(probs[order])
    cut = int(np.searchsorted(cumulative, cfg.top_p - 1e-12)) + 1
    keep = order[: min(cut, len(order))]

    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    out /= out.sum()
    return out


def _decode(gen: QueryGenerator, source_text: str, cfg: SamplerConfig,
            rng: np.random.Generator, limit: int) -> list[str]:
    tokens: list[str] = []
    while len(tokens) < limit:
        logits = gen.next_token_logits(source_text, tuple(tokens))
        probs = nucleus_filter(logits, cfg)
        idx = int(rng.choice(len(probs), p=probs))
        token = gen.vocab[idx]
        if token == gen.eos_token:
            break
        tokens.append(token)
    return tokens


def generate_queries(gen: QueryGenerator, passages: Sequence[Passage],
                     budget: GenerationBudget, cfg: SamplerConfig) -> list[Query]:
    """Decode budget.qpp queries per passage, deterministic per
    (seed, passage id, query number).

    An empty generation (eos first) is retried once on the same stream,
    then kept as a single placeholder token.
    """
    if budget.effective_corpus_size != len(passages):
        raise ValueError(
            f"budget was computed for {budget.effective_corpus_size} passages, "
            f"got {len(passages)}")
    limit = min(cfg.max_query_len, gen.max_query_len)
    queries: list[Query] = []
    for p in passages:
        source_text = passage_text(p)
        for n in range(1, budget.qpp + 1):
            rng = np.random.default_rng(derive_seed(cfg.seed, "genq", p.id, n))
            tokens = _decode(gen, source_text, cfg, rng, limit)
            if not tokens:
                tokens = _decode(gen, source_text, cfg, rng, limit)
            if not tokens:
                logger.warning("empty generation for passage %s (#%d); "
                               "keeping placeholder", p.id, n)
                tokens = [PLACEHOLDER_TOKEN]
            queries.append(Query(f"genQ-{p.id}-{n}", " ".join(tokens), p.id))
    return queries


def mock_generator(passages: Iterable[Passage], content_logit: float = 8.0,
                   noise_logit: float = 0.0, eos_logit: float = 6.0,
                   max_query_len: int = 12,
                   noise_vocab: tuple[str, ...] = NOISE_VOCAB) -> QueryGenerator:
    """Test double for a trained query generator.

    Vocabulary = corpus content tokens + a fixed noise vocabulary + eos.
    For a given passage, its content tokens get high frequency-weighted
    logits, every other noise-vocabulary token a low uniform logit, and
    anything else -inf, so temperature trades passage terms against noise.
    The noise vocabulary may overlap corpus tokens (e.g. to model badly
    generated queries that mention plausible but unrelated terms); the
    passage's own tokens always take the content logit.
    """
    content = sorted({t for p in passages for t in tokenize(passage_text(p))})
    content_set = set(content)
    extra = [t for t in dict.fromkeys(noise_vocab) if t not in content_set]
    vocab = tuple(content) + tuple(extra) + (EOS_TOKEN,)
    index = {t: i for i, t in enumerate(vocab)}
    noise_idx = np.array(sorted(index[t] for t in dict.fromkeys(noise_vocab)),
                         dtype=int)
    eos_idx = index[EOS_TOKEN]

    def next_token_logits(source_text: str, prefix: tuple[str, ...]) -> np.ndarray:
        logits = np.full(len(vocab), -np.inf)
        logits[noise_idx] = noise_logit
        logits[eos_idx] = eos_logit
        for token, count in Counter(tokenize(source_text)).items():
            if token in index:
                logits[index[token]] = content_logit + math.log(count)
        return logits

    return QueryGenerator(vocab, next_token_logits, EOS_TOKEN, max_query_len)


def write_gen_qrels(queries: Iterable[Query], path: str | Path) -> None:
    """TSV mapping each generated query to its source passage with grade 1."""
    with open(path, "w", encoding="utf-8") as f:
        for q in queries:
            if q.source_passage_id is None:
                raise ValueError(f"query {q.id} has no source passage")
            f.write(f"{q.id}\t{q.source_passage_id}\t1\n")
