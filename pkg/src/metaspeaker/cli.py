"""Command-line entry point: ``metaspeaker <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from metaspeaker import __version__
from metaspeaker.config import RunConfig, load_config
from metaspeaker.encoder import embed_numpy
from metaspeaker.errors import ConfigError, InputError, NumericError
from metaspeaker.evaluation import (
    evaluate_identification,
    evaluate_verification,
    format_identification_table,
    format_verification_table,
    generate_trials,
    identification_rows,
    read_trials,
    verification_rows,
    write_report_csv,
    write_trials,
)
from metaspeaker.features import FeatureConfig
from metaspeaker.manifest import FeatureStore, Manifest, dump_embeddings, scan_corpus, split_speakers
from metaspeaker.objective import MODES
from metaspeaker.rng import substream_seed
from metaspeaker.synthetic import SyntheticSpec, generate
from metaspeaker.trainer import fit, load_checkpoint, load_encoder

logger = logging.getLogger("metaspeaker")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seconds(text: str) -> float | None:
    if text == "full":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected seconds or 'full', got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("seconds must be positive")
    return value


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run_manifest(path: Path, subcommand: str, config: dict, seed, artifacts: list) -> None:
    """``run.json`` recording what produced the artifacts next to it."""
    record = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifacts": [str(a) for a in artifacts],
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _write_atomic(path, json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _load_manifest(path) -> Manifest:
    if not Path(path).exists():
        raise InputError(f"manifest {path} does not exist")
    return Manifest.load(path)


def _checkpoint_setup(path):
    """(encoder, feature config) from a checkpoint."""
    payload = load_checkpoint(path)
    feats = payload["config"].get("features")
    fcfg = FeatureConfig(**feats) if feats else FeatureConfig()
    return load_encoder(path), fcfg


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".run.json")


# -- subcommands -------------------------------------------------------------


def cmd_prepare(args) -> int:
    root = Path(args.audio_dir)
    if not root.is_dir():
        raise InputError(f"audio directory {root} does not exist")
    m = scan_corpus(root)
    out = Path(args.manifest_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    m.save(out)
    write_run_manifest(_sidecar(out), "prepare", {"audio_dir": str(root)}, None, [out])
    print(f"{len(m)} utterances, {len(m.speakers)} speakers, {m.skipped} skipped -> {out}")
    return 0


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_speakers=args.n_speakers,
        utterances_per_speaker=args.utterances,
        duration_range=(args.min_seconds, args.max_seconds),
        noise_level=args.noise,
        seed=args.seed,
    )
    m = generate(spec, args.out_dir)
    write_run_manifest(Path(args.out_dir) / "run.json", "synth", dataclasses.asdict(spec), args.seed, [args.out_dir])
    print(f"wrote {len(m)} utterances for {len(m.speakers)} speakers under {args.out_dir}")
    return 0


def cmd_split(args) -> int:
    train, test = split_speakers(_load_manifest(args.manifest), args.train_fraction, args.seed)
    train.save(args.train_out)
    test.save(args.test_out)
    print(f"train: {len(train.speakers)} speakers, test: {len(test.speakers)} speakers")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(mode=args.mode, seed=args.seed)
    train_m = _load_manifest(args.train_manifest)
    val_m = _load_manifest(args.val_manifest)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(args.cache_dir) if args.cache_dir else None
    feats = FeatureStore(train_m, cfg.features, cache)
    val_feats = FeatureStore(val_m, cfg.features, cache)
    _write_atomic(out / "config.ini", cfg.to_ini())
    final = fit(
        train_m,
        val_m,
        feats,
        val_feats,
        cfg.encoder,
        cfg.episode,
        cfg.train,
        out,
        cfg.loss,
        cfg.features,
        config_echo=cfg.to_dict(),
        resume_from=args.resume,
    )
    artifacts = sorted(p.name for p in out.glob("ckpt_*.bin")) + ["metrics.csv", "config.ini"]
    write_run_manifest(out / "run.json", "train", cfg.to_dict(), cfg.train.seed, artifacts)
    print(f"final checkpoint: {final}")
    return 0


def cmd_trials(args) -> int:
    m = _load_manifest(args.manifest)
    trials = generate_trials(m, args.pos_per_spk, args.neg_per_spk, np.random.default_rng(substream_seed(args.seed, "trials")))
    out = Path(args.out)
    write_trials(out, trials)
    config = {"manifest": str(args.manifest), "pos_per_spk": args.pos_per_spk, "neg_per_spk": args.neg_per_spk}
    write_run_manifest(_sidecar(out), "trials", config, args.seed, [out])
    n_pos = sum(t.label for t in trials)
    print(f"{n_pos} target + {len(trials) - n_pos} nontarget trials -> {out}")
    return 0


def cmd_eval_verification(args) -> int:
    encoder, fcfg = _checkpoint_setup(args.checkpoint)
    m = _load_manifest(args.manifest)
    if not Path(args.trials).exists():
        raise InputError(f"trial list {args.trials} does not exist")
    trials = read_trials(args.trials)
    feats = FeatureStore(m, fcfg, args.cache_dir)
    seed = substream_seed(args.seed, "cropping")
    reports = [
        evaluate_verification(trials, feats, lambda s: embed_numpy(encoder, s), secs, seed, fcfg, args.p_target)
        for secs in args.test_seconds
    ]
    print(format_verification_table(reports))
    rows = [(*row[:3], args.seed) for r in reports for row in verification_rows(r)]
    out = Path(args.report_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, rows)
    config = {"checkpoint": str(args.checkpoint), "trials": str(args.trials), "test_seconds": args.test_seconds}
    write_run_manifest(_sidecar(out), "eval-verification", config, args.seed, [out])
    return 0


def cmd_eval_identification(args) -> int:
    encoder, fcfg = _checkpoint_setup(args.checkpoint)
    m = _load_manifest(args.manifest)
    feats = FeatureStore(m, fcfg, args.cache_dir)
    reports = []
    for n_way in args.n_way:
        for q in args.query_seconds:
            reports.append(
                evaluate_identification(
                    m,
                    feats,
                    lambda s: embed_numpy(encoder, s),
                    n_way=n_way,
                    episodes=args.episodes,
                    enroll_seconds=args.enroll_seconds,
                    test_per_spk=args.test_per_spk,
                    query_seconds=q,
                    rng=substream_seed(args.seed, f"identification-{n_way}-{q}"),
                    fcfg=fcfg,
                )
            )
    print(format_identification_table(reports))
    rows = [(*row[:3], args.seed) for r in reports for row in identification_rows(r)]
    out = Path(args.report_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, rows)
    config = {
        "checkpoint": str(args.checkpoint),
        "n_way": args.n_way,
        "episodes": args.episodes,
        "query_seconds": args.query_seconds,
        "enroll_seconds": args.enroll_seconds,
        "test_per_spk": args.test_per_spk,
    }
    write_run_manifest(_sidecar(out), "eval-identification", config, args.seed, [out])
    return 0


def cmd_dump_embeddings(args) -> int:
    encoder, fcfg = _checkpoint_setup(args.checkpoint)
    m = _load_manifest(args.manifest)
    feats = FeatureStore(m, fcfg, args.cache_dir, compute_missing=not args.cache_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = dump_embeddings(m, lambda s: embed_numpy(encoder, s), feats, out, encoder.cfg.embedding_dim)
    write_run_manifest(_sidecar(out), "dump-embeddings", {"checkpoint": str(args.checkpoint)}, None, [out])
    print(f"{n} embeddings -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="metaspeaker", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="scan a speaker-directory corpus into a manifest", formatter_class=fmt)
    p.add_argument("--audio-dir", required=True)
    p.add_argument("--manifest-out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="generate a synthetic multi-speaker corpus", formatter_class=fmt)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-speakers", type=int, default=30)
    p.add_argument("--utterances", type=int, default=10, help="utterances per speaker")
    p.add_argument("--min-seconds", type=float, default=3.0)
    p.add_argument("--max-seconds", type=float, default=8.0)
    p.add_argument("--noise", type=float, default=2.0, help="white-noise level relative to the tone RMS")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="speaker-disjoint train/test split of a manifest", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser(
        "train",
        help="train an encoder",
        formatter_class=fmt,
        description="Without --config: 100-way 1-shot episodes with 2 queries per class, 2 s supports, "
        "1-2 s queries, lambda=1, ResNet34 (32-64-128-256), SGD with Nesterov momentum 0.9, "
        "weight decay 1e-4, initial lr 0.1 divided by 10 on validation plateaus.",
    )
    p.add_argument("--config", help="INI file with [features] [episode] [encoder] [loss] [train] sections")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=MODES, default=None, help="overrides the config's mode")
    p.add_argument("--seed", type=int, default=None, help="overrides the config's seed")
    p.add_argument("--cache-dir", default=None, help="feature cache directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("trials", help="generate a verification trial list", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pos-per-spk", type=int, default=100)
    p.add_argument("--neg-per-spk", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_trials)

    p = sub.add_parser("eval-verification", help="EER and minDCF on a trial list", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--test-seconds", nargs="+", type=_seconds, default=[1.0, 2.0, 5.0], help="values or 'full'")
    p.add_argument("--p-target", type=float, default=0.01)
    p.add_argument("--report-out", required=True, help="CSV report path")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_verification)

    p = sub.add_parser("eval-identification", help="N-way unseen-speaker identification", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-way", nargs="+", type=int, default=[5, 20, 50, 100])
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--query-seconds", nargs="+", type=_seconds, default=[1.0])
    p.add_argument("--enroll-seconds", type=_seconds, default=5.0, help="value or 'full'")
    p.add_argument("--test-per-spk", type=int, default=5)
    p.add_argument("--report-out", required=True, help="CSV report path")
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_identification)

    p = sub.add_parser("dump-embeddings", help="write one embedding per utterance", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--cache-only", action="store_true", help="fail on utterances missing from the cache")
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"metaspeaker: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"metaspeaker: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError) as exc:
        print(f"metaspeaker: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
