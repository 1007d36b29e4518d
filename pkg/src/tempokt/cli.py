"""Command-line pipeline: gen-synthetic -> featurize -> train -> eval."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import evaluation, featurize, ingest, synth, training
from .model import load_checkpoint


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="Override the seed from the config/spec")
    common.add_argument("--threads", type=int, default=None,
                        help="Cap BLAS threads (1 = bit-deterministic reference mode)")
    common.add_argument("--config", type=Path, default=None,
                        help="Training config JSON (defaults mirror the published setup)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="tempokt",
        description="Knowledge tracing transformer with multi-granularity lag-time features",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-synthetic", parents=[common],
                       help="Generate a synthetic interaction log with known signal")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--questions", type=int, default=200)
    p.add_argument("--events-min", type=int, default=100)
    p.add_argument("--events-max", type=int, default=300)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--theta-scale", type=float, default=1.0)
    p.add_argument("--difficulty-scale", type=float, default=1.0)
    p.set_defaults(handler=_cmd_gen_synthetic)

    p = sub.add_parser("featurize", parents=[common],
                       help="Encode interaction/question CSVs into a binary dataset")
    p.add_argument("interactions", type=Path)
    p.add_argument("questions", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--max-seq", type=int, default=100)
    p.add_argument("--stride", type=int, default=100)
    p.add_argument("--ablate-lags", action="store_true",
                   help="Replace all three lag-time streams with a constant id")
    p.set_defaults(handler=_cmd_featurize)

    p = sub.add_parser("train", parents=[common],
                       help="Train on an encoded dataset and write run artifacts")
    p.add_argument("dataset", type=Path)
    p.add_argument("run_dir", type=Path)
    p.add_argument("--resume", type=Path, default=None,
                   help="Checkpoint to continue from (epoch numbering continues)")
    p.add_argument("--no-timing", action="store_true",
                   help="Write 0.0 in the history seconds column (byte-reproducible runs)")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="Evaluate a checkpoint against an encoded dataset")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path)
    p.add_argument("--json", dest="json_out", type=Path, default=None,
                   help="Also write the report as JSON to this path")
    p.add_argument("--per-user", type=Path, default=None,
                   help="Write a per-user AUC CSV to this path")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(handler=_cmd_eval)

    return parser


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ValueError(f"--threads must be >= 1, got {threads}")
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=threads)


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    spec = synth.SyntheticSpec(
        n_users=args.users,
        n_questions=args.questions,
        events_min=args.events_min,
        events_max=args.events_max,
        gamma=args.gamma,
        theta_scale=args.theta_scale,
        difficulty_scale=args.difficulty_scale,
        seed=args.seed if args.seed is not None else 0,
    )
    data = synth.generate(spec)
    interactions, questions, truth = synth.write_csvs(data, args.out_dir)
    print(f"wrote {interactions} ({data.truth['n_events']} events, {spec.n_users} users)")
    print(f"wrote {questions} ({spec.n_questions} questions)")
    print(f"wrote {truth} (oracle AUC {data.truth['oracle_auc']:.4f})")
    return 0


def _cmd_featurize(args: argparse.Namespace) -> int:
    try:
        records = ingest.parse_interactions(args.interactions)
    except ingest.ParseError as exc:
        raise SystemExit(f"{args.interactions}: {exc}") from exc
    try:
        qmeta = ingest.parse_questions(args.questions)
    except ingest.ParseError as exc:
        raise SystemExit(f"{args.questions}: {exc}") from exc
    histories = ingest.filter_and_group(records)
    if not histories:
        raise SystemExit("no question events after filtering; nothing to encode")
    dataset = featurize.encode_histories(histories, qmeta,
                                         max_seq=args.max_seq, stride=args.stride)
    if args.ablate_lags:
        dataset.windows = featurize.ablate_lag_streams(dataset.windows)
    featurize.save_dataset(dataset, args.out)
    print(f"wrote {args.out}: {len(dataset.windows)} windows, "
          f"{len(histories)} users, {sum(len(h.events) for h in histories)} events")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = featurize.load_dataset(args.dataset)
    raw = {}
    if args.config is not None:
        raw = json.loads(Path(args.config).read_text())
    if "model" not in raw:
        raw["model"] = {}
    raw["model"].setdefault("max_seq", dataset.max_seq)
    try:
        config = training.load_train_config(raw, vocab_fallback=dataset.vocab)
    except (ValueError, TypeError) as exc:
        raise SystemExit(f"invalid config: {exc}") from exc
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed,
                         model=replace(config.model, seed=args.seed))
    run, _ = training.train(config, dataset, args.run_dir, resume=args.resume,
                            wall_clock=not args.no_timing)
    last = run.records[-1]
    print(f"trained {len(run.records)} epochs; best val AUC {run.best_val_auc:.4f} "
          f"(epoch {run.best_epoch}); final val loss {last.val_loss:.4f}")
    print(f"artifacts in {args.run_dir}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model, _, _, _ = load_checkpoint(args.checkpoint)
    dataset = featurize.load_dataset(args.dataset)
    if model.config.vocab.sizes() != dataset.vocab.sizes():
        raise SystemExit(
            "checkpoint and dataset vocabularies do not match: "
            f"{model.config.vocab.sizes()} vs {dataset.vocab.sizes()}"
        )
    if model.config.max_seq != dataset.max_seq:
        raise SystemExit(
            f"checkpoint max_seq {model.config.max_seq} does not match dataset "
            f"max_seq {dataset.max_seq}"
        )
    report = evaluation.evaluate(model, dataset.windows, batch_size=args.batch_size)
    print(report.to_text())
    if args.json_out is not None:
        Path(args.json_out).write_text(report.to_json() + "\n")
    if args.per_user is not None:
        rows = evaluation.per_user_auc(model, dataset.windows, batch_size=args.batch_size)
        with open(args.per_user, "w") as fh:
            fh.write("user_id,auc,n_events\n")
            for uid, user_auc, n in rows:
                fh.write(f"{uid},{user_auc:.8f},{n}\n")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return 0
    try:
        _apply_threads(args.threads)
        return args.handler(args)
    except SystemExit as exc:
        if exc.code and not isinstance(exc.code, int):
            print(exc.code, file=sys.stderr)
            return 1
        raise
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
