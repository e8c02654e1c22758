"""Stage functions and the end-to-end orchestrator.

Every stage reads its inputs from files and writes its outputs to files, so
each one can be rerun on its own. ``run_pipeline`` chains them and writes a
manifest with versions, seeds and artifact hashes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .channeling import build_channels, read_channels_jsonl, write_channels_jsonl
from .clustering import ChannelClusterer, read_clusters_jsonl, write_clusters_jsonl, write_scalers
from .config import PipelineConfig
from .detector import CBSeqDetector, detect, write_results_csv
from .embedding import BehaviorEmbedder, EmbeddingModel, train_cbow
from .eval import (FoldResult, RepeatSummary, kfold_eval, repeat_eval, roc_curve, split_benign,
                   undersample, unknown_protocol, write_metrics_csv, write_roc_csv)
from .ingest import (FlowAssembler, read_flow_jsonl, read_pcap, write_flow_jsonl)
from .msformer.classifier import MSFormerClassifier
from .msformer.model import MSFormer
from .sequences import (SEQUENCE_TYPES, BehaviorSequence, behavior_sequences, read_behseq_jsonl,
                        write_behseq_jsonl)
from .synthgen import ScenarioSpec, generate_corpus, generate_pcap, reference_corpus

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

STAGES = ("ingest", "channels", "cluster", "sequences", "embed-train", "train", "eval")


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def _require(path, what: str) -> Path:
    p = Path(path)
    if not str(path) or not p.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ingest

def ingest_pcap(path, out, idle_timeout: float = 120.0, reorder_tolerance: float = 1.0) -> dict:
    reader = read_pcap(_require(path, "pcap"))
    asm = FlowAssembler(idle_timeout, reorder_tolerance)
    for pkt in reader:
        asm.push(pkt)
    flows = asm.finish()
    write_flow_jsonl(flows, out)
    return {"packets": reader.packets, "skipped": reader.skipped, "truncated": reader.truncated,
            "rejected": asm.rejected, "flows": len(flows)}


def ingest_jsonl(path, out) -> dict:
    errors = []
    flows = read_flow_jsonl(_require(path, "flow file"), errors=errors)
    for e in errors:
        log.warning("skipped %s", e)
    write_flow_jsonl(flows, out)
    return {"flows": len(flows), "bad_lines": len(errors)}


# synthetic input

def load_scenarios(path) -> list[ScenarioSpec]:
    """Scenarios from TOML: ``[[scenario]]`` tables, or one scenario at top level."""
    with open(_require(path, "scenario file"), "rb") as fh:
        doc = tomllib.load(fh)
    tables = doc.get("scenario", [doc])
    if isinstance(tables, dict):
        tables = [tables]
    if not tables:
        raise ValueError(f"{path}: no scenarios defined")
    return [ScenarioSpec.from_dict(t) for t in tables]


def synth(scenario_path, out, pcap=None, meta=None, idle_timeout: float = 120.0) -> dict:
    flows, truth = generate_corpus(load_scenarios(scenario_path))
    write_flow_jsonl(flows, out)
    n_packets = generate_pcap(flows, pcap, idle_timeout) if pcap else 0
    if meta:
        with open(meta, "w", encoding="utf-8") as fh:
            json.dump(truth, fh, sort_keys=True)
    return {"flows": len(flows), "packets": n_packets}


# channels / clusters / sequences

def channels_stage(flows_path, out, window: float = 86400.0) -> dict:
    flows = read_flow_jsonl(_require(flows_path, "flow file"))
    channels = build_channels(flows, window)
    write_channels_jsonl(channels, out)
    return {"channels": len(channels)}


def cluster_stage(channels_path, out, eps: float = 1.0, min_pts: int = 1,
                  slice_seconds: float = 14400.0, standardize: bool = False,
                  scalers_out=None) -> dict:
    channels = read_channels_jsonl(_require(channels_path, "channel file"))
    clusterer = ChannelClusterer(eps, min_pts, slice_seconds, standardize).fit(channels)
    write_clusters_jsonl(clusterer.clusters_, out)
    if scalers_out:
        write_scalers(clusterer.scalers_, scalers_out)
    return {"clusters": len(clusterer.clusters_)}


def sequences_stage(clusters_path, out) -> dict:
    clusters = read_clusters_jsonl(_require(clusters_path, "cluster file"))
    seqs = behavior_sequences(clusters)
    write_behseq_jsonl(seqs, out)
    return {"sequences": len(seqs), "labeled": sum(s.y is not None for s in seqs)}


# embeddings / model

def embed_stage(behseq_path, seq_type: str, out, dim=100, window=5, negatives=5, epochs=5,
                lr=0.025, min_count=1, seed=42) -> dict:
    if seq_type not in SEQUENCE_TYPES:
        raise ValueError(f"unknown sequence type {seq_type!r}")
    seqs = read_behseq_jsonl(_require(behseq_path, "behavior sequence file"))
    model = train_cbow([s.tokens(seq_type) for s in seqs], seq_type, dim, window, negatives,
                       epochs, lr, min_count, seed)
    model.save(out)
    return {"vocab": len(model), "dim": model.dim, "final_loss": model.loss_curve[-1]}


def load_embeddings(paths: dict[str, str]) -> dict[str, EmbeddingModel]:
    return {t: EmbeddingModel.load(_require(p, f"{t} embedding"), t) for t, p in paths.items()}


def parse_emb_list(spec: str) -> dict[str, str]:
    """``pn.vec,iat.vec,sp.vec,dp.vec`` in PN/IAT/SP/DP order."""
    parts = [p.strip() for p in spec.split(",") if p.strip()]
    if len(parts) != len(SEQUENCE_TYPES):
        raise ValueError(f"expected {len(SEQUENCE_TYPES)} embedding files (pn,iat,sp,dp), got {len(parts)}")
    return dict(zip(SEQUENCE_TYPES, parts))


def train_stage(behseq_path, emb_paths: dict[str, str], out, *, d_model=128, n_blocks=6,
                n_heads=8, max_len=16, positional_encoding=True, lr=1e-5, batch_size=8,
                epochs=20, seed=42, balance=True) -> dict:
    seqs = [s for s in read_behseq_jsonl(_require(behseq_path, "behavior sequence file"))
            if s.y is not None]
    y = np.array([s.y for s in seqs], dtype=int)
    if balance:
        keep = undersample(y, seed)
        seqs, y = [seqs[i] for i in keep], y[keep]
    embedder = BehaviorEmbedder.from_models(load_embeddings(emb_paths))
    clf = MSFormerClassifier(d_model, n_blocks, n_heads, None, max_len, positional_encoding,
                             lr, batch_size, epochs, seed).fit(embedder.transform(seqs), y)
    model = clf.model_
    base = Path(out).resolve().parent
    model.meta = {
        "embeddings": {t: os.path.relpath(Path(p).resolve(), base) for t, p in emb_paths.items()},
        "n_train": len(seqs),
        "balance": balance,
        "epochs": epochs,
        "lr": lr,
        "batch_size": batch_size,
    }
    model.save(out)
    return {"n_train": len(seqs), "final_loss": clf.loss_curve_[-1]}


def detect_stage(model_path, behseq_path, out, emb_paths: dict[str, str] | None = None,
                 threshold: float = 0.5) -> dict:
    model = MSFormer.load(_require(model_path, "model file"))
    if emb_paths is None:
        stored = model.meta.get("embeddings")
        if not stored:
            raise ValueError("model file records no embedding paths; pass --emb")
        base = Path(model_path).resolve().parent
        emb_paths = {t: str(base / p) for t, p in stored.items()}
    seqs = read_behseq_jsonl(_require(behseq_path, "behavior sequence file"))
    results = detect(load_embeddings(emb_paths), model, seqs, threshold)
    write_results_csv(results, out)
    return {"clusters": len(results), "malware": sum(r.is_malware for r in results)}


# evaluation

@dataclass
class EvalOutcome:
    summary: RepeatSummary
    roc_scores: np.ndarray
    roc_labels: np.ndarray


def _pool(results: Sequence[FoldResult]):
    return (np.concatenate([r.scores for r in results]),
            np.concatenate([r.labels for r in results]))


def evaluate_known(seqs: Sequence[BehaviorSequence], make_detector: Callable[[int], object],
                   k: int = 5, repeats: int = 10, seed: int = 42, balance: bool = True) -> EvalOutcome:
    """k-fold cross validation, repeated with seeds seed, seed+1, ..."""
    seqs = list(seqs)
    summary = repeat_eval(
        lambda run, s: kfold_eval(seqs, make_detector, k, s, run, balance),
        repeats, [seed + r for r in range(repeats)])
    return EvalOutcome(summary, *_pool(summary.runs))


def family_split(seqs: Sequence[BehaviorSequence], held_out: Sequence[str],
                 train_families: Sequence[str] | None = None):
    """Malware sequences split by family; clusters mixing both sides are dropped."""
    held = set(held_out)
    train_m, test_m = [], []
    for s in seqs:
        if s.y != 1:
            continue
        fams = set(s.families)
        if fams and fams <= held:
            test_m.append(s)
        elif fams and not fams & held and (train_families is None or fams <= set(train_families)):
            train_m.append(s)
    if not train_m or not test_m:
        raise ValueError(f"family split {sorted(held)} leaves an empty malware side")
    return train_m, test_m


def evaluate_unknown(seqs: Sequence[BehaviorSequence], make_detector: Callable[[int], object],
                     held_out: Sequence[str], train_families: Sequence[str] | None = None,
                     repeats: int = 10, seed: int = 42, balance: bool = True) -> EvalOutcome:
    """Train on the remaining families, test on ``held_out`` plus unseen benign."""
    seqs = list(seqs)
    train_m, test_m = family_split(seqs, held_out, train_families)
    benign = [s for s in seqs if s.y == 0]

    def experiment(run, s):
        train_b, test_b = split_benign(benign, s)
        return [unknown_protocol(train_m, train_b, test_m, test_b, make_detector, s, run, balance)]

    summary = repeat_eval(experiment, repeats, [seed + r for r in range(repeats)])
    return EvalOutcome(summary, *_pool(summary.runs))


def detector_factory(cfg: PipelineConfig) -> Callable[[int], CBSeqDetector]:
    params = cfg.detector_params()
    return lambda seed: CBSeqDetector(**{**params, "seed": seed})


def eval_stage(cfg: PipelineConfig, seqs: Sequence[BehaviorSequence], out, roc_out=None) -> dict:
    make = detector_factory(cfg)
    e = cfg.eval
    if e.mode == "known":
        outcome = evaluate_known(seqs, make, e.k, e.repeats, cfg.seed, e.balance)
    else:
        if not e.unknown_families:
            raise ValueError("eval.unknown_families must name the held-out families")
        outcome = evaluate_unknown(seqs, make, e.unknown_families, None, e.repeats,
                                   cfg.seed, e.balance)
    write_metrics_csv(outcome.summary.runs, out)
    if roc_out:
        write_roc_csv(roc_curve(outcome.roc_scores, outcome.roc_labels), roc_out)
    return {"mean": outcome.summary.mean, "std": outcome.summary.std}


def sequences_from_input(cfg: PipelineConfig) -> list[BehaviorSequence]:
    """In-memory upstream stages, for ``eval`` without a prepared sequence file."""
    if cfg.eval.behseq:
        return read_behseq_jsonl(_require(cfg.eval.behseq, "behavior sequence file"))
    flows = _input_flows(cfg)
    channels = build_channels(flows, cfg.channels.window)
    c = cfg.cluster
    clusters = ChannelClusterer(c.eps, c.min_pts, c.slice, c.standardize).fit(channels).clusters_
    return behavior_sequences(clusters)


def _input_flows(cfg: PipelineConfig):
    inp = cfg.input
    if inp.pcap:
        asm = FlowAssembler(cfg.ingest.idle_timeout, cfg.ingest.reorder_tolerance)
        for pkt in read_pcap(_require(inp.pcap, "pcap")):
            asm.push(pkt)
        return asm.finish()
    if inp.flows:
        return read_flow_jsonl(_require(inp.flows, "flow file"))
    if inp.scenario:
        return generate_corpus(load_scenarios(inp.scenario))[0]
    if inp.reference_days > 0:
        return reference_corpus(inp.reference_seed, days=inp.reference_days)[0]
    raise ValueError("no input configured: set input.pcap, input.flows, input.scenario "
                     "or input.reference_days")


# orchestration

def _versions() -> dict:
    import numba
    import scipy
    import sklearn
    return {"cbseq": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__,
            "numba": numba.__version__}


def run_pipeline(cfg: PipelineConfig) -> dict[str, Path]:
    """ingest -> channels -> cluster -> sequences -> embed-train -> train -> eval.

    Artifacts land in ``cfg.out_dir``; a failed stage raises :class:`StageError`
    and leaves earlier artifacts in place.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = {
        "flows": out / "flows.jsonl",
        "channels": out / "channels.jsonl",
        "clusters": out / "clusters.jsonl",
        "scalers": out / "scalers.json",
        "behseq": out / "behseq.jsonl",
        **{f"emb_{t}": out / f"{t}.vec" for t in SEQUENCE_TYPES},
        "model": out / "model.msf",
        "metrics": out / "metrics.csv",
        "roc": out / "roc.csv",
    }
    stats = {}

    def stage(name, fn):
        log.info("stage %s", name)
        try:
            stats[name] = fn()
        except Exception as exc:
            raise StageError(name, exc) from exc

    inp, c, e, m = cfg.input, cfg.cluster, cfg.embedding, cfg.model

    def ingest():
        if inp.pcap:
            return ingest_pcap(inp.pcap, art["flows"], cfg.ingest.idle_timeout,
                               cfg.ingest.reorder_tolerance)
        if inp.flows:
            return ingest_jsonl(inp.flows, art["flows"])
        flows = _input_flows(cfg)
        write_flow_jsonl(flows, art["flows"])
        return {"flows": len(flows)}

    def embed_all():
        return {t: embed_stage(art["behseq"], t, art[f"emb_{t}"], e.dim, e.window, e.negatives,
                               e.epochs, e.lr, e.min_count, cfg.seed + i)
                for i, t in enumerate(SEQUENCE_TYPES)}

    def evaluate():
        return eval_stage(cfg, read_behseq_jsonl(art["behseq"]), art["metrics"], art["roc"])

    stage("ingest", ingest)
    stage("channels", lambda: channels_stage(art["flows"], art["channels"], cfg.channels.window))
    stage("cluster", lambda: cluster_stage(art["channels"], art["clusters"], c.eps, c.min_pts,
                                           c.slice, c.standardize, art["scalers"]))
    stage("sequences", lambda: sequences_stage(art["clusters"], art["behseq"]))
    stage("embed-train", embed_all)
    stage("train", lambda: train_stage(
        art["behseq"], {t: str(art[f"emb_{t}"]) for t in SEQUENCE_TYPES}, art["model"],
        d_model=m.d_model, n_blocks=m.n_blocks, n_heads=m.n_heads, max_len=m.max_len,
        positional_encoding=m.positional_encoding, lr=m.lr, batch_size=m.batch_size,
        epochs=m.epochs, seed=cfg.seed, balance=cfg.eval.balance))
    stage("eval", evaluate)

    manifest = {
        "versions": _versions(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "stages": stats,
        "artifacts": {k: {"path": p.name, "sha256": sha256_file(p)} for k, p in art.items()},
    }
    art["manifest"] = out / "manifest.json"
    with open(art["manifest"], "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=float)
    return art
