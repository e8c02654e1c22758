"""Command line entry point: ``cbseq <stage> ...``.

Successful commands print a one-line JSON summary on stdout and exit 0.
Failures print ``{"error": ..., "message": ...}`` on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import PipelineConfig, load_config

EXIT_USAGE = 2
EXIT_FAILURE = 1


class _Parser(argparse.ArgumentParser):
    """argparse with JSON usage errors on stderr."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message, "command": self.prog}),
              file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=float))


def cmd_ingest(args):
    from .pipeline import ingest_jsonl, ingest_pcap
    if args.pcap:
        return ingest_pcap(args.pcap, args.out, args.idle_timeout, args.reorder_tolerance)
    return ingest_jsonl(args.jsonl, args.out)


def cmd_channels(args):
    from .pipeline import channels_stage
    return channels_stage(args.flows, args.out, args.window)


def cmd_cluster(args):
    from .pipeline import cluster_stage
    return cluster_stage(args.channels, args.out, args.eps, args.minpts, args.slice,
                         args.standardize, args.scalers)


def cmd_sequences(args):
    from .pipeline import sequences_stage
    return sequences_stage(args.clusters, args.out)


def cmd_embed_train(args):
    from .pipeline import embed_stage
    return embed_stage(args.behseq, args.type, args.out, args.dim, args.window, args.negatives,
                       args.epochs, args.lr, args.min_count, args.seed)


def cmd_train(args):
    from .pipeline import parse_emb_list, train_stage
    return train_stage(args.behseq, parse_emb_list(args.emb), args.out, d_model=args.d_model,
                       n_blocks=args.blocks, n_heads=args.heads, max_len=args.max_len,
                       positional_encoding=not args.no_posenc, lr=args.lr,
                       batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       balance=not args.no_balance)


def cmd_detect(args):
    from .pipeline import detect_stage, parse_emb_list
    emb = parse_emb_list(args.emb) if args.emb else None
    return detect_stage(args.model, args.behseq, args.out, emb, args.threshold)


def _config(path) -> PipelineConfig:
    if path:
        return load_config(path)
    from .config import config_from_dict
    return config_from_dict({})


def cmd_eval(args):
    from .pipeline import eval_stage, sequences_from_input
    cfg = _config(args.config)
    if args.mode:
        cfg.eval.mode = args.mode
    if args.behseq:
        cfg.eval.behseq = args.behseq
    return eval_stage(cfg, sequences_from_input(cfg), args.out, args.roc)


def cmd_synth(args):
    from .pipeline import synth
    return synth(args.scenario, args.out, args.pcap, args.meta)


def cmd_pipeline(args):
    from .pipeline import run_pipeline
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    art = run_pipeline(cfg)
    return {"out_dir": cfg.out_dir, "artifacts": sorted(k for k in art)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cbseq", description="Channel-based behavior sequence "
                                "malware traffic detection.")
    p.add_argument("--version", action="version", version=f"cbseq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("ingest", help="assemble bidirectional flows from a pcap or flow JSONL")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--pcap", help="classic libpcap Ethernet capture")
    src.add_argument("--jsonl", help="pre-extracted flow records (one JSON object per line)")
    s.add_argument("--out", required=True, help="output flows.jsonl")
    s.add_argument("--idle-timeout", type=float, default=120.0, help="seconds (default 120)")
    s.add_argument("--reorder-tolerance", type=float, default=1.0,
                   help="max timestamp regression accepted, seconds (default 1)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("channels", help="aggregate flows into per-window IP-pair channels")
    s.add_argument("--flows", required=True)
    s.add_argument("--out", required=True, help="output channels.jsonl")
    s.add_argument("--window", type=float, default=86400.0, help="seconds (default 86400)")
    s.set_defaults(func=cmd_channels)

    s = sub.add_parser("cluster", help="DBSCAN over channel abstract features per time slice")
    s.add_argument("--channels", required=True)
    s.add_argument("--out", required=True, help="output clusters.jsonl")
    s.add_argument("--eps", type=float, default=1.0)
    s.add_argument("--minpts", type=int, default=1)
    s.add_argument("--slice", type=float, default=14400.0, help="seconds (default 14400)")
    s.add_argument("--standardize", action="store_true", help="z-score after log1p")
    s.add_argument("--scalers", help="also write the fitted feature scalers as JSON")
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("sequences", help="build PN/IAT/SP/DP behavior sequences per cluster")
    s.add_argument("--clusters", required=True)
    s.add_argument("--out", required=True, help="output behseq.jsonl")
    s.set_defaults(func=cmd_sequences)

    s = sub.add_parser("embed-train", help="train a CBOW embedding for one token stream")
    s.add_argument("--behseq", required=True)
    s.add_argument("--type", required=True, choices=("pn", "iat", "sp", "dp"))
    s.add_argument("--out", required=True, help="output .vec file")
    s.add_argument("--dim", type=int, default=100)
    s.add_argument("--window", type=int, default=5)
    s.add_argument("--negatives", type=int, default=5)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--lr", type=float, default=0.025)
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_embed_train)

    s = sub.add_parser("train", help="train the MSFormer classifier")
    s.add_argument("--behseq", required=True)
    s.add_argument("--emb", required=True, help="pn.vec,iat.vec,sp.vec,dp.vec")
    s.add_argument("--out", required=True, help="output model file")
    s.add_argument("--no-posenc", action="store_true", help="disable positional encoding")
    s.add_argument("--no-balance", action="store_true", help="skip majority undersampling")
    s.add_argument("--d-model", type=int, default=128)
    s.add_argument("--blocks", type=int, default=6)
    s.add_argument("--heads", type=int, default=8)
    s.add_argument("--max-len", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="score behavior sequences with a trained model")
    s.add_argument("--model", required=True)
    s.add_argument("--behseq", required=True)
    s.add_argument("--out", required=True, help="output results.csv")
    s.add_argument("--emb", help="override the embedding files recorded in the model")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", help="repeated known- or unknown-family evaluation")
    s.add_argument("--mode", choices=("known", "unknown"))
    s.add_argument("--config", help="TOML pipeline config")
    s.add_argument("--behseq", help="labeled behavior sequences (overrides the config input)")
    s.add_argument("--out", required=True, help="output metrics.csv")
    s.add_argument("--roc", help="output roc.csv over pooled test scores")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate labeled synthetic traffic from a TOML scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True, help="output flows.jsonl")
    s.add_argument("--pcap", help="also write a capture that reassembles into the flows")
    s.add_argument("--meta", help="ground-truth JSON")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", help="run every stage end to end from a TOML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", help="override out_dir from the config")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        stage = getattr(exc, "stage", None)
        if stage:
            err["stage"] = stage
            err["cause"] = type(exc.cause).__name__
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return EXIT_FAILURE
    _emit(result or {})
    return 0


if __name__ == "__main__":
    sys.exit(main())
