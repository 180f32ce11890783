"""Stage-based pipeline runner with on-disk caching.

Each stage produces its artifacts once and is skipped on re-run when both
its input hash and its config hash match the cache manifest and all output
files still exist. Stage layout under the output root:

    <out>/<dataset>/shared/<stage>/...     ingest, generate, mine, label,
                                           pretrain-<method>
    <out>/<dataset>/<method>/<stage>/...   train, evaluate, rerank

Generation, mining, and labeling artifacts are method-independent, so they
live in the shared scope and are reused across methods that agree on their
configs (generated queries are shared between the margin-distillation and
in-batch baselines by construction).
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus as corpus_io
from .corpus import Passage, load_corpus, load_qrels, load_queries, \
    passage_text, save_corpus, save_queries, tokenize
from .evaluation import EvalReport, RunRanking, ce_rerank, evaluate, \
    full_rank, load_report, write_trec_run
from .labeling import build_dataset, read_dataset, write_dataset
from .mining import BM25Retriever, DenseRetriever, build_bm25_index, \
    mine_pools, read_hard_negatives, write_hard_negatives
from .models import EncoderModel, OptimizerState, apply_gradients, \
    init_encoder, lexical_overlap_ce, load_model, save_model
from .pretraining import PRETRAIN_METHODS, PretrainConfig, pretrain, udalm_step
from .qgen import SamplerConfig, compute_budget, \
    generate_queries, mock_generator, write_gen_qrels
from .training import TrainRunConfig, LossConfig, gpl_train, qgen_train, \
    write_loss_trace
from .util import canonical_json, derive_seed, sha256_bytes, sha256_files

logger = logging.getLogger(__name__)

CACHE_ROOT_ENV = "PIPELINE_CACHE_ROOT"

STAGE_NAMES = ("ingest", "generate", "mine", "label", "train", "pretrain",
               "evaluate", "rerank")

FINAL_METHODS = ("zero_shot", "gpl", "qgen", "qgen_hard", "udalm")

DEFAULTS: dict = {
    "dataset": "dataset",
    "seed": 0,
    "method": "gpl",
    "paths": {
        "corpus": None,
        "queries": None,
        "qrels": None,
        "output": "out",
        "source_corpus": None,
        "source_queries": None,
        "source_tuples": None,
        "init_model": None,
    },
    "encoder": {"dim": 32, "max_seq_len": 350, "init_scale": 0.05},
    "ingest": {"drop_missing_body": False},
    "generate": {
        "total_budget": 250_000,
        "temperature": 1.0,
        "top_k": 25,
        "top_p": 0.95,
        "max_query_len": 12,
        "generator": "mock",
    },
    "mine": {"retrievers": ["bm25", "dense"], "n_per_retriever": 50},
    "label": {"cross_encoder": "lexical", "ce_scale": 10.0},
    "train": {
        "gpl": {"steps": 140_000, "batch_size": 32, "learning_rate": 2e-3,
                "log_every": 100, "checkpoint_every": 0},
        "qgen": {"steps": None, "batch_size": 75, "learning_rate": 2e-3,
                 "tau": 20.0, "log_every": 100},
    },
    "pretrain": {"steps": 100_000, "batch_size": 8, "learning_rate": 2e-3,
                 "deletion_ratio": 0.6, "mask_ratio": 0.15,
                 "ict_mask_prob": 0.9, "dropout_rate": 0.1, "tau": 20.0},
    "udalm": {"mix_weight": 0.5, "steps": 1000, "batch_size": 8,
              "learning_rate": 2e-3, "mask_ratio": 0.15},
    "evaluate": {"metrics": ["ndcg@10", "mrr@10"], "cutoff": 1000,
                 "gain": "linear"},
    "rerank": {"top_n": 100},
}


class PipelineError(RuntimeError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class PipelineConfig:
    """Merged configuration tree; see DEFAULTS for the full key set."""

    data: dict

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict | None = None
                  ) -> "PipelineConfig":
        with open(path, encoding="utf-8") as f:
            loaded = json.load(f)
        merged = _deep_merge(DEFAULTS, loaded)
        if overrides:
            merged = _deep_merge(merged, overrides)
        return cls(merged)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        return cls(_deep_merge(DEFAULTS, data))

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def dataset_dir(self) -> Path:
        root = os.environ.get(CACHE_ROOT_ENV) or self.data["paths"]["output"]
        return Path(root) / self.data["dataset"]

    def stage_dir(self, stage: str, scope: str = "shared") -> Path:
        return self.dataset_dir / scope / stage


def parse_method(method: str) -> tuple[str | None, str]:
    """Split a method id into (pretraining method or None, final method)."""
    if "+" in method:
        pre, _, final = method.partition("+")
        if pre in PRETRAIN_METHODS and final in ("gpl", "qgen", "qgen_hard"):
            return pre, final
    elif method in FINAL_METHODS:
        return ("mlm", "udalm") if method == "udalm" else (None, method)
    valid = list(FINAL_METHODS) + [f"{p}+{m}" for p in PRETRAIN_METHODS
                                   for m in ("gpl", "qgen", "qgen_hard")]
    raise PipelineError(f"unknown method {method!r}; valid methods: "
                        + ", ".join(valid))


# --- cache manifest -----------------------------------------------------------


class CacheManifest:
    """Per-dataset record of completed stages: input hash, config hash,
    output file list, and timestamp. A stage is a cache hit only when both
    hashes match and every output file still exists."""

    def __init__(self, path: Path):
        self.path = path
        self.entries: dict[str, dict] = {}
        if path.exists():
            try:
                with open(path, encoding="utf-8") as f:
                    self.entries = json.load(f)
            except (json.JSONDecodeError, OSError):
                logger.warning("corrupt cache manifest at %s; rebuilding", path)
                self.entries = {}

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8") as f:
            json.dump(self.entries, f, sort_keys=True, indent=2)

    def record(self, key: str, input_hash: str, config_hash: str,
               outputs: Sequence[Path]) -> None:
        self.entries[key] = {
            "input_hash": input_hash,
            "config_hash": config_hash,
            "outputs": sorted(str(p) for p in outputs),
            "timestamp": time.time(),
        }
        self.save()

    def resolve(self, key: str, input_hash: str, config_hash: str) -> bool:
        entry = self.entries.get(key)
        if entry is None:
            return False
        if entry["input_hash"] != input_hash or entry["config_hash"] != config_hash:
            return False
        return all(Path(p).exists() for p in entry["outputs"])


def resolve_cache(cfg: PipelineConfig, stage_key: str, input_hash: str,
                  config_hash: str) -> bool:
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    return manifest.resolve(stage_key, input_hash, config_hash)


@contextmanager
def _run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(
            f"output directory {directory} is locked by another run "
            f"(remove {lock} if that run is dead)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_provenance(stage_dir: Path, config_hash: str, input_hash: str,
                      files: Sequence[Path]) -> None:
    doc = {"config_hash": config_hash, "input_hash": input_hash,
           "files": sorted(p.name for p in files)}
    with open(stage_dir / "provenance.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)


# --- stage helpers ------------------------------------------------------------


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path}; run {produced_by} first")
    return path


def _stage_config_hash(cfg: PipelineConfig, *sections: str, extra: dict | None = None
                       ) -> str:
    payload = {"seed": cfg.seed, "encoder": cfg["encoder"]}
    for section in sections:
        payload[section] = cfg.data[section]
    if extra:
        payload.update(extra)
    return sha256_bytes(canonical_json(payload).encode())


def _ingested(cfg: PipelineConfig) -> dict[str, Path]:
    d = cfg.stage_dir("ingest")
    return {"corpus": d / "corpus.jsonl", "queries": d / "queries.jsonl",
            "qrels": d / "qrels.tsv"}


def _initial_model(cfg: PipelineConfig, passages: Sequence[Passage],
                   pooling: str = "mean") -> EncoderModel:
    init_path = cfg["paths"].get("init_model")
    if init_path:
        return load_model(init_path)
    tokens = [t for p in passages for t in tokenize(passage_text(p))]
    return init_encoder(tokens, dim=int(cfg["encoder"]["dim"]),
                        seed=derive_seed(cfg.seed, "init-encoder"),
                        pooling=pooling,
                        init_scale=float(cfg["encoder"]["init_scale"]),
                        max_seq_len=int(cfg["encoder"]["max_seq_len"]))


def _cross_encoder(cfg: PipelineConfig):
    backend = cfg["label"]["cross_encoder"]
    if backend == "lexical":
        return lexical_overlap_ce(float(cfg["label"]["ce_scale"]))
    raise PipelineError(f"unknown cross-encoder backend {backend!r}")


def _model_path_for(cfg: PipelineConfig, method: str) -> Path:
    """Checkpoint the evaluate stage should read, given the method id."""
    pre, final = parse_method(method)
    if final == "zero_shot":
        if pre is None:
            return cfg.stage_dir("ingest") / "model-initial.json"
        return cfg.stage_dir(f"pretrain-{pre}") / "model-pretrained.json"
    return cfg.stage_dir("train", scope=method) / "model-final.json"


# --- stages -------------------------------------------------------------------


def stage_ingest(cfg: PipelineConfig) -> list[Path]:
    paths = cfg["paths"]
    if not paths.get("corpus"):
        raise PipelineError("config needs paths.corpus")
    source_files = [paths["corpus"]]
    for key in ("queries", "qrels"):
        if paths.get(key):
            source_files.append(paths[key])
    input_hash = sha256_files(source_files)
    config_hash = _stage_config_hash(cfg, "ingest")
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    out = _ingested(cfg)
    stage_dir = cfg.stage_dir("ingest")
    outputs = [out["corpus"], stage_dir / "model-initial.json"]
    if paths.get("queries"):
        outputs.append(out["queries"])
    if paths.get("qrels"):
        outputs.append(out["qrels"])
    if manifest.resolve("ingest", input_hash, config_hash):
        logger.info("ingest: cache hit")
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(paths["corpus"],
                           drop_missing_body=bool(cfg["ingest"]["drop_missing_body"]))
    if not passages:
        raise PipelineError("corpus is empty after ingestion")
    save_corpus(passages, out["corpus"])
    if paths.get("queries"):
        save_queries(load_queries(paths["queries"]), out["queries"])
    if paths.get("qrels"):
        corpus_io.save_qrels(load_qrels(paths["qrels"]), out["qrels"])
    save_model(_initial_model(cfg, passages), stage_dir / "model-initial.json")
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record("ingest", input_hash, config_hash, outputs)
    return outputs


def stage_generate(cfg: PipelineConfig) -> list[Path]:
    corpus_file = _require(_ingested(cfg)["corpus"], "ingest")
    input_hash = sha256_files([corpus_file])
    config_hash = _stage_config_hash(cfg, "generate")
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir("generate")
    outputs = [stage_dir / "gen-queries.jsonl", stage_dir / "gen-qrels.tsv"]
    if manifest.resolve("generate", input_hash, config_hash):
        logger.info("generate: cache hit")
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(corpus_file)
    gen_cfg = cfg["generate"]
    budget = compute_budget(len(passages), int(gen_cfg["total_budget"]))
    if budget.effective_corpus_size < len(passages):
        passages = corpus_io.downsample_corpus(
            passages, budget.effective_corpus_size,
            derive_seed(cfg.seed, "downsample"))
    if gen_cfg["generator"] != "mock":
        raise PipelineError(f"unknown generator backend {gen_cfg['generator']!r}")
    generator = mock_generator(load_corpus(corpus_file),
                               max_query_len=int(gen_cfg["max_query_len"]))
    sampler = SamplerConfig(temperature=float(gen_cfg["temperature"]),
                            top_k=int(gen_cfg["top_k"]),
                            top_p=float(gen_cfg["top_p"]),
                            seed=derive_seed(cfg.seed, "generate"),
                            max_query_len=int(gen_cfg["max_query_len"]))
    queries = generate_queries(generator, passages, budget, sampler)
    save_queries(queries, outputs[0])
    write_gen_qrels(queries, outputs[1])
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record("generate", input_hash, config_hash, outputs)
    return outputs


def stage_mine(cfg: PipelineConfig) -> list[Path]:
    corpus_file = _require(_ingested(cfg)["corpus"], "ingest")
    queries_file = _require(cfg.stage_dir("generate") / "gen-queries.jsonl",
                            "generate")
    model_file = _require(cfg.stage_dir("ingest") / "model-initial.json", "ingest")
    input_hash = sha256_files([corpus_file, queries_file, model_file])
    config_hash = _stage_config_hash(cfg, "mine")
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir("mine")
    outputs = [stage_dir / "hard-negatives.jsonl"]
    if manifest.resolve("mine", input_hash, config_hash):
        logger.info("mine: cache hit")
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(corpus_file)
    queries = load_queries(queries_file)
    retrievers = []
    for name in cfg["mine"]["retrievers"]:
        if name == "bm25":
            retrievers.append(BM25Retriever(build_bm25_index(passages)))
        elif name == "dense":
            retrievers.append(DenseRetriever(load_model(model_file), passages,
                                             similarity="cosine"))
        else:
            raise PipelineError(f"unknown retriever {name!r}")
    pools = mine_pools(queries, retrievers,
                       n_per_retriever=int(cfg["mine"]["n_per_retriever"]),
                       seed=derive_seed(cfg.seed, "mine"))
    write_hard_negatives(pools, outputs[0])
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record("mine", input_hash, config_hash, outputs)
    return outputs


def stage_label(cfg: PipelineConfig) -> list[Path]:
    corpus_file = _require(_ingested(cfg)["corpus"], "ingest")
    queries_file = _require(cfg.stage_dir("generate") / "gen-queries.jsonl",
                            "generate")
    negatives_file = _require(cfg.stage_dir("mine") / "hard-negatives.jsonl",
                              "mine")
    input_hash = sha256_files([corpus_file, queries_file, negatives_file])
    config_hash = _stage_config_hash(cfg, "label")
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir("label")
    outputs = [stage_dir / "gpl-training-data.tsv"]
    if manifest.resolve("label", input_hash, config_hash):
        logger.info("label: cache hit")
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(load_queries(queries_file),
                            read_hard_negatives(negatives_file),
                            load_corpus(corpus_file), _cross_encoder(cfg),
                            seed=derive_seed(cfg.seed, "label"))
    write_dataset(dataset, outputs[0])
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record("label", input_hash, config_hash, outputs)
    return outputs


def stage_pretrain(cfg: PipelineConfig, method: str) -> list[Path]:
    if method not in PRETRAIN_METHODS:
        raise PipelineError(f"unknown pre-training method {method!r}")
    corpus_file = _require(_ingested(cfg)["corpus"], "ingest")
    input_hash = sha256_files([corpus_file])
    config_hash = _stage_config_hash(cfg, "pretrain",
                                     extra={"pretrain_method": method})
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir(f"pretrain-{method}")
    outputs = [stage_dir / "model-pretrained.json"]
    if manifest.resolve(f"pretrain-{method}", input_hash, config_hash):
        logger.info("pretrain-%s: cache hit", method)
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(corpus_file)
    pooling = "cls" if method == "cd" else "mean"
    model = _initial_model(cfg, passages, pooling=pooling)
    section = cfg["pretrain"]
    pre_cfg = PretrainConfig(method=method, steps=int(section["steps"]),
                             batch_size=int(section["batch_size"]),
                             learning_rate=float(section["learning_rate"]),
                             seed=derive_seed(cfg.seed, "pretrain", method),
                             deletion_ratio=float(section["deletion_ratio"]),
                             mask_ratio=float(section["mask_ratio"]),
                             ict_mask_prob=float(section["ict_mask_prob"]),
                             dropout_rate=float(section["dropout_rate"]),
                             tau=float(section["tau"]))
    model = pretrain(model, passages, pre_cfg)
    save_model(model, outputs[0])
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record(f"pretrain-{method}", input_hash, config_hash, outputs)
    return outputs


def _load_start_model(cfg: PipelineConfig, pre: str | None,
                      similarity: str) -> EncoderModel:
    if pre is None:
        model = load_model(cfg.stage_dir("ingest") / "model-initial.json")
    else:
        model = load_model(_require(
            cfg.stage_dir(f"pretrain-{pre}") / "model-pretrained.json",
            f"pretrain (method {pre})"))
    model.similarity = similarity
    return model


def stage_train(cfg: PipelineConfig, method: str) -> list[Path]:
    pre, final = parse_method(method)
    if final == "zero_shot":
        raise PipelineError("zero_shot has no train stage")
    corpus_file = _require(_ingested(cfg)["corpus"], "ingest")
    stage_dir = cfg.stage_dir("train", scope=method)
    outputs = [stage_dir / "model-final.json", stage_dir / "loss-trace.csv"]

    upstream = [corpus_file, cfg.stage_dir("ingest") / "model-initial.json"]
    if pre is not None:
        upstream.append(_require(
            cfg.stage_dir(f"pretrain-{pre}") / "model-pretrained.json",
            f"pretrain (method {pre})"))
    if final == "gpl":
        upstream.append(_require(cfg.stage_dir("label") / "gpl-training-data.tsv",
                                 "label"))
        upstream.append(_require(cfg.stage_dir("generate") / "gen-queries.jsonl",
                                 "generate"))
    elif final in ("qgen", "qgen_hard"):
        upstream.append(_require(cfg.stage_dir("generate") / "gen-queries.jsonl",
                                 "generate"))
        if final == "qgen_hard":
            upstream.append(_require(
                cfg.stage_dir("mine") / "hard-negatives.jsonl", "mine"))
    elif final == "udalm":
        for key in ("source_corpus", "source_queries", "source_tuples"):
            if not cfg["paths"].get(key):
                raise PipelineError(f"udalm requires paths.{key}")
            upstream.append(_require(Path(cfg["paths"][key]),
                                     "nothing (external source data)"))
    input_hash = sha256_files(upstream)
    config_hash = _stage_config_hash(cfg, "train", "udalm",
                                     extra={"method": method})
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    if manifest.resolve(f"train:{method}", input_hash, config_hash):
        logger.info("train %s: cache hit", method)
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(corpus_file)
    train_seed = derive_seed(cfg.seed, "train", method)

    if final == "gpl":
        section = cfg["train"]["gpl"]
        model = _load_start_model(cfg, pre, "dot")
        dataset = read_dataset(cfg.stage_dir("label") / "gpl-training-data.tsv")
        queries = load_queries(cfg.stage_dir("generate") / "gen-queries.jsonl")
        run_cfg = TrainRunConfig(
            steps=None if section["steps"] is None else int(section["steps"]),
            batch_size=int(section["batch_size"]),
            seed=train_seed, learning_rate=float(section["learning_rate"]),
            method="gpl", log_every=int(section.get("log_every", 1)),
            checkpoint_every=int(section.get("checkpoint_every", 0)))
        model, trace = gpl_train(model, dataset, passages, queries, run_cfg,
                                 checkpoint_dir=stage_dir)
    elif final in ("qgen", "qgen_hard"):
        section = cfg["train"]["qgen"]
        model = _load_start_model(cfg, pre, "cosine")
        queries = load_queries(cfg.stage_dir("generate") / "gen-queries.jsonl")
        pools = None
        if final == "qgen_hard":
            pools = read_hard_negatives(cfg.stage_dir("mine")
                                        / "hard-negatives.jsonl")
        run_cfg = TrainRunConfig(
            steps=None if section["steps"] is None else int(section["steps"]),
            batch_size=int(section["batch_size"]),
            seed=train_seed, learning_rate=float(section["learning_rate"]),
            method="qgen", log_every=int(section.get("log_every", 1)))
        model, trace = qgen_train(model, queries, passages, run_cfg,
                                  negatives=pools,
                                  loss_cfg=LossConfig(
                                      tau=float(section["tau"]),
                                      similarity="cosine"))
    else:
        model, trace = _udalm_train(cfg, pre, passages, train_seed)

    save_model(model, outputs[0])
    write_loss_trace(trace, outputs[1])
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record(f"train:{method}", input_hash, config_hash, outputs)
    return outputs


def _udalm_train(cfg: PipelineConfig, pre: str | None,
                 target_passages: Sequence[Passage], seed: int
                 ) -> tuple[EncoderModel, list[tuple[int, float]]]:
    """Multi-task schedule: masked prediction on the target corpus mixed
    with margin regression on labeled source tuples."""
    section = cfg["udalm"]
    model = _load_start_model(cfg, pre, "dot")
    source_passages = load_corpus(cfg["paths"]["source_corpus"])
    source_queries = load_queries(cfg["paths"]["source_queries"])
    source_data = read_dataset(cfg["paths"]["source_tuples"])
    source_texts = {p.id: passage_text(p) for p in source_passages}
    query_texts = {q.id: q.text for q in source_queries}
    target_texts = [passage_text(p) for p in target_passages]

    steps = int(section["steps"])
    batch_size = int(section["batch_size"])
    opt = OptimizerState(float(section["learning_rate"]))
    trace = []
    tuples = source_data.tuples
    for step in range(1, steps + 1):
        rng = np.random.default_rng(derive_seed(seed, "udalm", step))
        target_batch = [target_texts[i] for i in
                        rng.choice(len(target_texts),
                                   size=min(batch_size, len(target_texts)),
                                   replace=False)]
        picked = rng.choice(len(tuples), size=min(batch_size, len(tuples)),
                            replace=False)
        source_batch = (
            [query_texts[tuples[i].query_id] for i in picked],
            [source_texts[tuples[i].pos_id] for i in picked],
            [source_texts[tuples[i].neg_id] for i in picked],
            [tuples[i].margin for i in picked],
        )
        loss, grads = udalm_step(model, target_batch, source_batch,
                                 mix_weight=float(section["mix_weight"]),
                                 mask_ratio=float(section["mask_ratio"]),
                                 rng=rng)
        apply_gradients(model, grads, opt)
        trace.append((step, loss))
    return model, trace


def stage_evaluate(cfg: PipelineConfig, method: str) -> list[Path]:
    ingested = _ingested(cfg)
    corpus_file = _require(ingested["corpus"], "ingest")
    queries_file = _require(ingested["queries"], "ingest (with paths.queries)")
    qrels_file = _require(ingested["qrels"], "ingest (with paths.qrels)")
    model_file = _require(_model_path_for(cfg, method),
                          "train" if parse_method(method)[1] != "zero_shot"
                          else "ingest/pretrain")
    input_hash = sha256_files([corpus_file, queries_file, qrels_file, model_file])
    config_hash = _stage_config_hash(cfg, "evaluate", extra={"method": method})
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir("evaluate", scope=method)
    outputs = [stage_dir / "report.json", stage_dir / "run.json",
               stage_dir / "run.trec"]
    if manifest.resolve(f"evaluate:{method}", input_hash, config_hash):
        logger.info("evaluate %s: cache hit", method)
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(model_file)
    passages = load_corpus(corpus_file)
    queries = load_queries(queries_file)
    qrels = load_qrels(qrels_file)
    section = cfg["evaluate"]
    run = full_rank(model, queries, passages, int(section["cutoff"]))
    report = evaluate(run, queries, passages, qrels,
                      metrics=tuple(section["metrics"]),
                      cutoff=int(section["cutoff"]), gain=section["gain"])
    report.config["method"] = method
    report.save(outputs[0])
    _save_run(run, outputs[1])
    write_trec_run(run, outputs[2], tag=method)
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record(f"evaluate:{method}", input_hash, config_hash, outputs)
    return outputs


def _save_run(run: RunRanking, path: Path) -> None:
    doc = {"cutoff": run.cutoff,
           "entries": {qid: [[pid, score] for pid, score in ranked]
                       for qid, ranked in run.entries.items()}}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)


def _load_run(path: Path) -> RunRanking:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    return RunRanking({qid: [(pid, float(score)) for pid, score in ranked]
                       for qid, ranked in doc["entries"].items()},
                      cutoff=int(doc["cutoff"]))


def stage_rerank(cfg: PipelineConfig, method: str) -> list[Path]:
    ingested = _ingested(cfg)
    corpus_file = _require(ingested["corpus"], "ingest")
    queries_file = _require(ingested["queries"], "ingest (with paths.queries)")
    qrels_file = _require(ingested["qrels"], "ingest (with paths.qrels)")
    run_file = _require(cfg.stage_dir("evaluate", scope=method) / "run.json",
                        "evaluate")
    input_hash = sha256_files([corpus_file, queries_file, qrels_file, run_file])
    config_hash = _stage_config_hash(cfg, "rerank", "label",
                                     extra={"method": method})
    manifest = CacheManifest(cfg.dataset_dir / "cache-manifest.json")
    stage_dir = cfg.stage_dir("rerank", scope=method)
    outputs = [stage_dir / "report.json", stage_dir / "run.trec"]
    if manifest.resolve(f"rerank:{method}", input_hash, config_hash):
        logger.info("rerank %s: cache hit", method)
        return outputs

    stage_dir.mkdir(parents=True, exist_ok=True)
    passages = load_corpus(corpus_file)
    queries = load_queries(queries_file)
    qrels = load_qrels(qrels_file)
    run = _load_run(run_file)
    reranked = ce_rerank(run, _cross_encoder(cfg), queries, passages,
                         top_n=int(cfg["rerank"]["top_n"]))
    section = cfg["evaluate"]
    report = evaluate(reranked, queries, passages, qrels,
                      metrics=tuple(section["metrics"]),
                      cutoff=int(section["cutoff"]), gain=section["gain"])
    report.config["method"] = f"{method}+rerank"
    report.save(outputs[0])
    write_trec_run(reranked, outputs[1], tag=f"{method}+rerank")
    _write_provenance(stage_dir, config_hash, input_hash, outputs)
    manifest.record(f"rerank:{method}", input_hash, config_hash, outputs)
    return outputs


def run_stage(name: str, cfg: PipelineConfig) -> list[Path]:
    """Run one named stage; method-scoped stages take the method from the
    config. Raises an actionable error when upstream artifacts are missing."""
    method = cfg.data.get("method", "gpl")
    if name == "ingest":
        return stage_ingest(cfg)
    if name == "generate":
        return stage_generate(cfg)
    if name == "mine":
        return stage_mine(cfg)
    if name == "label":
        return stage_label(cfg)
    if name == "pretrain":
        pre, _ = parse_method(method)
        if pre is None:
            raise PipelineError(f"method {method!r} has no pre-training stage")
        return stage_pretrain(cfg, pre)
    if name == "train":
        return stage_train(cfg, method)
    if name == "evaluate":
        return stage_evaluate(cfg, method)
    if name == "rerank":
        return stage_rerank(cfg, method)
    raise PipelineError(f"unknown stage {name!r}; valid stages: "
                        + ", ".join(STAGE_NAMES))


def run_pipeline(cfg: PipelineConfig, method: str) -> EvalReport:
    """Execute the method's full stage sequence and return the eval report."""
    pre, final = parse_method(method)
    cfg = PipelineConfig(_deep_merge(cfg.data, {"method": method}))
    with _run_lock(cfg.dataset_dir):
        stage_ingest(cfg)
        if pre is not None:
            stage_pretrain(cfg, pre)
        if final == "gpl":
            stage_generate(cfg)
            stage_mine(cfg)
            stage_label(cfg)
            stage_train(cfg, method)
        elif final == "qgen":
            stage_generate(cfg)
            stage_train(cfg, method)
        elif final == "qgen_hard":
            stage_generate(cfg)
            stage_mine(cfg)
            stage_train(cfg, method)
        elif final == "udalm":
            stage_train(cfg, method)
        report_path = stage_evaluate(cfg, method)[0]
    return load_report(report_path)
