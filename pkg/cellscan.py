#!/usr/bin/env python3
"""
cellscan command line.

    cellscan.py preprocess --in DIR --out DIR [--sigma F --low N --high N]
    cellscan.py train --data DIR --mode raw|canny [--epochs N --batch N --lr F ...]
    cellscan.py eval --data DIR --mode M --model FILE
    cellscan.py predict --image FILE --mode M --model FILE
    cellscan.py report --in FILE... [--out FILE]

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from src.canny import CannyParams, preprocess_corpus
from src.core import CellScanError, configure_logging, get_logger
from src.imagedata import scan_dataset
from src.trainer import (
    ModelConfig,
    TrainConfig,
    compare_reports,
    evaluate,
    load_model,
    load_report,
    predict_one,
    run_experiment,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

cli_logger = get_logger(__name__, 'cli')


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors to the caller instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


def _configure_logging_from_env() -> None:
    configure_logging(
        log_level=os.environ.get('LOG_LEVEL', 'INFO'),
        enable_console=os.environ.get('LOG_ENABLE_CONSOLE', 'true').lower() == 'true',
        enable_file=os.environ.get('LOG_ENABLE_FILE', 'false').lower() == 'true',
        enable_structured=os.environ.get('LOG_ENABLE_STRUCTURED', 'true').lower() == 'true',
        log_dir=os.environ.get('LOG_DIR', 'logs'),
        log_file=os.environ.get('LOG_FILE', 'cellscan.log')
    )


def _resolve_threads(value: Optional[int]) -> int:
    if value is not None:
        threads = value
    else:
        raw = os.environ.get('CELLSCAN_THREADS', '1')
        try:
            threads = int(raw)
        except ValueError:
            raise UsageError(f"CELLSCAN_THREADS must be an integer, got '{raw}'")
    if threads < 1:
        raise UsageError(f"thread count must be >= 1, got {threads}")
    return threads


def _canny_params(args: argparse.Namespace) -> CannyParams:
    return CannyParams(sigma=args.sigma, low_threshold=args.low, high_threshold=args.high)


def _print_config(config: Dict[str, Any]) -> None:
    print(json.dumps(config, indent=2, sort_keys=True, default=str))
    sys.stdout.flush()


# --- Subcommands -------------------------------------------------------------

def cmd_preprocess(args: argparse.Namespace) -> int:
    params = _canny_params(args)
    threads = _resolve_threads(args.threads)
    _print_config({
        "command": "preprocess",
        "in": args.src,
        "out": args.dst,
        "canny": params.model_dump(),
        "threads": threads,
    })
    summary = preprocess_corpus(args.src, args.dst, params, threads=threads)
    print(f"images        {summary.images}")
    print(f"source_bytes  {summary.source_bytes}")
    print(f"output_bytes  {summary.output_bytes}")
    print(f"ratio         {summary.ratio:.4f}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if args.lr <= 0:
        raise UsageError(f"--lr must be > 0, got {args.lr}")
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        test_fraction=args.test_fraction,
        seed=args.seed,
        threads=_resolve_threads(args.threads),
        subset=args.subset,
    )
    model_config = ModelConfig.for_mode(args.mode, activation=args.activation, seed=args.seed)
    _print_config({
        "command": "train",
        "data": args.data,
        "mode": args.mode,
        "model": model_config.model_dump(),
        "train": train_config.model_dump(),
        "model_out": args.model_out,
        "report_out": args.report_out,
    })

    report = run_experiment(args.data, args.mode, model_config, train_config,
                            report_path=args.report_out, model_path=args.model_out)
    print("epoch  train_loss  train_acc  test_acc  seconds")
    for m in report.epochs:
        print(f"{m.epoch:5d}  {m.train_loss:10.4f}  {m.train_accuracy:9.4f}  {m.test_accuracy:8.4f}  "
              f"{m.wall_seconds:7.2f}")
    print(f"final test accuracy {report.totals.final_test_accuracy:.4f} "
          f"(best epoch {report.totals.best_epoch}), training seconds {report.totals.wall_seconds:.2f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    threads = _resolve_threads(args.threads)
    _print_config({
        "command": "eval",
        "data": args.data,
        "mode": args.mode,
        "model": args.model,
        "batch": args.batch,
        "threads": threads,
    })
    model = load_model(args.model)
    index = scan_dataset(args.data, args.mode)
    accuracy = evaluate(model, index, batch_size=args.batch, threads=threads)
    print(f"accuracy {accuracy:.4f} ({len(index)} images)")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    params = _canny_params(args)
    _print_config({
        "command": "predict",
        "image": args.image,
        "mode": args.mode,
        "model": args.model,
        "canny": params.model_dump() if args.mode == "canny" else None,
    })
    model = load_model(args.model)
    probability, label = predict_one(model, args.image, args.mode, params)
    print(f"probability {probability:.6f}")
    print(f"label {label}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _print_config({"command": "report", "in": args.inputs, "out": args.out})
    table = compare_reports([load_report(path) for path in args.inputs])
    print(table)
    if args.out:
        out = Path(args.out)
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(table + "\n", encoding="utf-8")
        except OSError as e:
            raise CellScanError(f"Cannot write table to {out}: {e}") from e
    return EXIT_OK


# --- Parser ----------------------------------------------------------------

def _add_threads(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--threads', type=int, default=None,
                        help='worker threads for image loading (default: $CELLSCAN_THREADS or 1)')


def _add_canny(parser: argparse.ArgumentParser) -> None:
    defaults = CannyParams()
    parser.add_argument('--sigma', type=float, default=defaults.sigma, help='Gaussian sigma')
    parser.add_argument('--low', type=float, default=defaults.low_threshold, help='hysteresis low threshold')
    parser.add_argument('--high', type=float, default=defaults.high_threshold, help='hysteresis high threshold')


def build_parser() -> CliArgumentParser:
    defaults = TrainConfig()
    parser = CliArgumentParser(
        prog='cellscan',
        description='Malaria cell classifier with Canny edge preprocessing',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest='command', metavar='COMMAND', required=True)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser('preprocess', help='write Canny edge maps of a corpus', formatter_class=formatter)
    p.add_argument('--in', dest='src', required=True, help='raw corpus root')
    p.add_argument('--out', dest='dst', required=True, help='edge-map corpus root')
    _add_canny(p)
    _add_threads(p)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser('train', help='train and report one run', formatter_class=formatter)
    p.add_argument('--data', required=True, help='corpus root with Parasitized/ and Uninfected/')
    p.add_argument('--mode', choices=['raw', 'canny'], default='raw')
    p.add_argument('--epochs', type=int, default=defaults.epochs, help='training epochs')
    p.add_argument('--batch', type=int, default=defaults.batch_size, help='mini-batch size, at least 2')
    p.add_argument('--lr', type=float, default=defaults.learning_rate, help='Adam learning rate')
    p.add_argument('--seed', type=int, default=defaults.seed, help='seed for initialisation, split and shuffling')
    p.add_argument('--test-fraction', type=float, default=defaults.test_fraction, help='held-out share per class')
    p.add_argument('--subset', type=int, default=None, help='stratified cap on the number of images')
    p.add_argument('--activation', choices=['relu', 'tanh', 'sigmoid'], default='relu', help='hidden activation')
    p.add_argument('--model-out', default=None, help='model file to write')
    p.add_argument('--report-out', default=None, help='JSON report to write (CSV written alongside)')
    _add_threads(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help='accuracy of a saved model on a corpus', formatter_class=formatter)
    p.add_argument('--data', required=True)
    p.add_argument('--mode', choices=['raw', 'canny'], default='raw')
    p.add_argument('--model', required=True)
    p.add_argument('--batch', type=int, default=64, help='evaluation batch size')
    _add_threads(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('predict', help='classify one cell image', formatter_class=formatter)
    p.add_argument('--image', required=True)
    p.add_argument('--mode', choices=['raw', 'canny'], default='raw')
    p.add_argument('--model', required=True)
    _add_canny(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser('report', help='compare run reports side by side', formatter_class=formatter)
    p.add_argument('--in', dest='inputs', nargs='+', required=True, help='JSON reports')
    p.add_argument('--out', default=None, help='also write the table to this file')
    p.set_defaults(handler=cmd_report)

    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(e.usage + str(e) + "\n")
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0)

    _configure_logging_from_env()
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except UsageError as e:
        sys.stderr.write(f"cellscan {args.command}: error: {e}\n")
        return EXIT_USAGE
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        sys.stderr.write(f"cellscan {args.command}: error: invalid configuration: {problems}\n")
        return EXIT_USAGE
    except CellScanError as e:
        cli_logger.debug(f"{args.command} failed", exc_info=True)
        sys.stderr.write(f"{e.component}: {e}\n")
        return EXIT_RUNTIME
    except OSError as e:
        sys.stderr.write(f"cli: {e}\n")
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == '__main__':
    main()
