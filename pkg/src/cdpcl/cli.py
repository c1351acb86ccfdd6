"""Command line entry point: ``cdpcl {gen-data,train,eval,report,selftest}``.

Exit codes: 0 on success, 1 for invalid flags or inputs, 2 when a command
fails while running (including failed self-test properties).
"""

from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

from .checkpoint import CheckpointError
from .netpbm import NetpbmError
from .numerics import ShapeError
from .protobank import LabelError
from .synthdomains import ConfigError, SplitConfig, make_split, read_split

log = logging.getLogger("cdpcl")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdpcl", description="Dual prototypical contrastive learning at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic source split and unseen-domain splits")
    p.add_argument("--out", required=True, help="output root (created)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=_positive, default=6)
    p.add_argument("--size", type=_positive, default=64, help="image height and width")
    p.add_argument("--train-count", type=_positive, default=200)
    p.add_argument("--eval-count", type=_positive, default=50)

    p = sub.add_parser("train", help="train one run from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config entry (repeatable)",
    )
    p.add_argument("--progress", type=int, default=0, metavar="N", help="log every N iterations")

    p = sub.add_parser("eval", help="mIoU and discrepancy tables for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, nargs="+", help="dataset directories or a gen-data root")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="Table-4 style summary and SVG curves over run directories")
    p.add_argument("--runs", required=True, nargs="+", help="run directories, or parents of run directories")
    p.add_argument("--out", required=True)

    p = sub.add_parser("selftest", help="run the acceptance criteria")
    p.add_argument("--full", action="store_true", help="include the desk-scale experiment (about an hour)")
    p.add_argument("--workdir", help="keep artifacts here instead of a temporary directory")
    return parser


# -- commands ------------------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = SplitConfig(
        out=args.out, seed=args.seed, classes=args.classes, height=args.size, width=args.size,
        train_count=args.train_count, eval_count=args.eval_count,
    )
    cfg.validate()
    dirs = make_split(cfg)
    for domain, path in dirs.items():
        print(f"{domain}\t{path}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .segtrain import load_config, parse_config, train

    cfg = load_config(args.config)
    if args.overrides:
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        text = Path(args.config).read_text() + "\n" + "\n".join(args.overrides) + "\n"
        cfg = parse_config(text, args.config)
    if not cfg.data_dir or not Path(cfg.data_dir).is_dir():
        raise ConfigError(f"data_dir {cfg.data_dir!r} is not a directory")
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    result = train(cfg, progress_every=args.progress)
    last = result.records[-1]
    print(f"checkpoint\t{result.checkpoint}")
    print(f"final\tl_total={last.l_total:.6f}\tl_seg={last.l_seg:.6f}\t{result.seconds:.1f}s")
    return EXIT_OK


def _dataset_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "split.txt").is_file():
            _, unseen = read_split(p)
            out += [p / d for d in unseen]
        elif p.is_dir():
            out.append(p)
        else:
            raise ConfigError(f"not a dataset directory: {p}")
    return out


def cmd_eval(args) -> int:
    from . import checkpoint as ckpt
    from .evalreport import discrepancy_report, evaluate, write_eval_outputs
    from .segtrain import TrainState
    from .synthdomains import read_dataset

    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    dirs = _dataset_dirs(args.data)
    state = TrainState.from_tensors(ckpt.load(args.checkpoint))
    datasets = [read_dataset(d) for d in dirs]
    table = evaluate(state, datasets)
    tables = []
    if state.bank_src.initialized.any() and state.bank_aug.initialized.any():
        tables = discrepancy_report(state, datasets)
    else:
        log.warning("checkpoint has no augmented prototype bank; skipping discrepancy tables")
    write_eval_outputs(args.out, table, tables)
    for d in table.domains:
        print(f"{d}\t{100 * table.mean[d]:.2f}")
    print(f"mean\t{100 * table.average:.2f}")
    return EXIT_OK


def _run_dirs(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise ConfigError(f"not a directory: {p}")
        if (p / "config.cfg").is_file() or (p / "train_log.csv").is_file():
            out.append(p)
        else:
            children = sorted(c for c in p.iterdir() if c.is_dir() and (c / "config.cfg").is_file())
            out += children or [p]
    return out


def cmd_report(args) -> int:
    from .evalreport import emit_report

    runs = _run_dirs(args.runs)
    report = emit_report(runs, args.out)
    sys.stdout.write(report.summary_markdown())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .acceptance import run_all

    if args.workdir:
        results = run_all(args.workdir, full=args.full)
    else:
        with tempfile.TemporaryDirectory(prefix="cdpcl-selftest-") as tmp:
            results = run_all(tmp, full=args.full)
    failed = [r for r in results if r.passed is False]
    print(f"{len(results) - len(failed)}/{len(results)} criteria not failing ({len(failed)} failed)")
    return EXIT_FAILED if failed else EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command == "selftest" else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, LabelError, ShapeError) as exc:
        print(f"cdpcl {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, NetpbmError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"cdpcl {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
