"""Command line entry point: ``paraformer <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format error,
3 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .attention import verify_equivalence
from .config import RunConfig, dump_run_config, load_datasets, load_run_config
from .data import export_features_csv, export_metrics_csv
from .errors import (CheckpointError, ConfigError, DataError, DataFormatError, ParaFormerError,
                     ShapeError, SizeError, StageError)
from .lifecycle import compress_keep_prefix, expand_add_branch, retention_report
from .model import init_model
from .parallel import PoolConfig, bench_inference
from .trainer import SCHEDULE_ALIASES, SCHEDULES, evaluate_stages, train

log = logging.getLogger("paraformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value run configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="paraformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model (progressive | milestone | joint)")
    _add_config(p)
    p.add_argument("--mode", choices=(*SCHEDULES, *SCHEDULE_ALIASES),
                   help="training schedule (overrides config)")
    p.add_argument("--out-dir", help="output directory (overrides config)")

    p = sub.add_parser("eval", help="per-stage loss/accuracy of a checkpoint")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", help="write metrics CSV here")

    p = sub.add_parser("bench", help="branch-parallel inference benchmark")
    _add_config(p)
    p.add_argument("--checkpoint", help="model to benchmark (default: fresh model from config)")
    p.add_argument("--workers", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--pinning", choices=("none", "round-robin"), default="none")
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--out", help="write benchmark CSV here")

    p = sub.add_parser("compress", help="keep only the first k branches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--keep", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("expand", help="append a new branch, optionally freezing the rest")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--freeze", action="store_true", help="freeze all pre-existing parameters")
    p.add_argument("--seed", type=int, default=0, help="initialisation seed of the new branch")
    p.add_argument("--epochs", type=int, default=0,
                   help="fine-tune on the configured data afterwards (0 = no training)")
    p.add_argument("--old-config", help="config describing the old shard for the retention report")

    p = sub.add_parser("verify-closedform", help="check the closed-form attention operator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tokens", type=int, default=2)
    p.add_argument("--width", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-8)

    p = sub.add_parser("export-features", help="pooled per-branch features as CSV")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", required=True)
    return parser


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.overrides)


def _print_stages(rows) -> None:
    for r in rows:
        print(f"epoch={r.epoch} stage={r.stage} split={r.split} "
              f"loss={r.loss:.6f} accuracy={r.accuracy:.4f}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.mode:
        cfg.train.schedule = args.mode
        cfg.train.validate()
    out_dir = Path(args.out_dir or cfg.out_dir)
    train_set, test_set = load_datasets(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.cfg").write_text(dump_run_config(cfg))
    model = init_model(cfg.model)
    n = model.n_branches

    def report(row):
        if row.stage == n:
            log.info("epoch %d %s stage-%d loss %.4f acc %.4f", row.epoch, row.split, row.stage,
                     row.loss, row.accuracy)

    stream = train(model, train_set, cfg.train, test_set, log=report)
    export_metrics_csv(stream, out_dir / "metrics.csv")
    checkpoint.save(model, out_dir / "model.pfck")
    _print_stages(evaluate_stages(model, test_set, cfg.train.epochs))
    print(f"checkpoint={out_dir / 'model.pfck'} metrics={out_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    model = checkpoint.load(args.checkpoint)
    cfg.model = model.config
    train_set, test_set = load_datasets(cfg)
    rows = evaluate_stages(model, train_set if args.split == "train" else test_set)
    _print_stages(rows)
    if args.out:
        export_metrics_csv(rows, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    model = checkpoint.load(args.checkpoint) if args.checkpoint else init_model(cfg.model)
    try:
        workers = [int(w) for w in args.workers.split(",")]
    except ValueError:
        raise UsageError(f"--workers must be comma-separated integers, got {args.workers!r}")
    c = model.config
    rng = np.random.default_rng(c.seed)
    images = rng.random((args.samples, c.image_height, c.image_width, c.channels),
                        dtype=np.float32)
    configs = [PoolConfig(w, args.batch_size, args.pinning) for w in workers]
    reports = bench_inference(model, images, configs)
    rows = [r.row() for r in reports]
    for r in rows:
        print(" ".join(f"{k}={v}" for k, v in r.items()))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


def cmd_compress(args) -> int:
    if args.keep < 1:
        raise UsageError(f"--keep must be >= 1, got {args.keep}")
    model = checkpoint.load(args.checkpoint)
    small = compress_keep_prefix(model, args.keep)
    checkpoint.save(small, args.out)
    print(f"kept {args.keep} of {model.n_branches} branches "
          f"(branch compression {model.n_branches / args.keep:.2f}x) -> {args.out}")
    return EXIT_OK


def cmd_expand(args) -> int:
    model = checkpoint.load(args.checkpoint)
    grown = expand_add_branch(model, args.seed, args.freeze)
    if args.epochs > 0:
        cfg = _run_config(args)
        cfg.model = grown.config
        cfg.train.epochs = args.epochs
        cfg.train.schedule = "joint"
        cfg.train.validate()
        new_train, new_test = load_datasets(cfg)
        old_test = new_test
        if args.old_config:
            old_cfg = load_run_config(args.old_config)
            old_cfg.model = model.config
            old_test = load_datasets(old_cfg)[1]
        before = model
        train(grown, new_train, cfg.train, new_test)
        report = retention_report(before, grown, old_test)
        for row in report.rows():
            print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in row.items()))
    checkpoint.save(grown, args.out)
    print(f"expanded to {grown.n_branches} branches "
          f"({'frozen' if args.freeze else 'trainable'} existing) -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    rep = verify_equivalence(args.seed, args.tokens, args.width, args.heads, args.tol)
    print(f"seed={rep.seed} tokens={rep.tokens} width={rep.width} heads={rep.heads} "
          f"max_abs_err={rep.max_abs_err:.3e} pass={rep.passed}")
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_export(args) -> int:
    cfg = _run_config(args)
    model = checkpoint.load(args.checkpoint)
    cfg.model = model.config
    train_set, test_set = load_datasets(cfg)
    rows = export_features_csv(model, train_set if args.split == "train" else test_set, args.out)
    print(f"wrote {rows} feature rows -> {args.out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "compress": cmd_compress,
    "expand": cmd_expand, "verify-closedform": cmd_verify, "export-features": cmd_export,
}


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, StageError, ShapeError, SizeError) as exc:
        print(f"paraformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, DataError, CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"paraformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ParaFormerError as exc:
        print(f"paraformer {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
