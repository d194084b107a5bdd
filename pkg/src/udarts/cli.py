"""Command-line entry point: ``udarts <subcommand> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(missing/corrupt checkpoint, unreadable data, numerical failure), 3 a gated
verification check failed.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .autodiff import NonFiniteError
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .harness import DataFormatError

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

SUBCOMMANDS = {
    "search": "bi-level architecture search (loss/spectral CSV, checkpoints, architecture JSON)",
    "train-final": "retrain the discretized architecture found by search",
    "evaluate": "accuracy and predictive variance of the retrained model",
    "spectra": "recompute the Hessian eigenvalue trajectory from search snapshots",
    "verify-lemmas": "numerical verification of the logistic-model lemmas (JSON report)",
    "noise-sweep": "input-SNR x parameter-noise grid on the retrained model",
}


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; ours is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="udarts", description="Uncertainty-aware differentiable architecture search.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND",
                                parser_class=_Parser)
    for name, help_text in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, metavar="PATH", help="experiment JSON config")
        p.add_argument("--seed", type=int, metavar="N",
                       help="run only this seed (default: every seed in the config)")
        p.add_argument("--out", metavar="DIR", help="output root (default: config output_dir)")
    return parser


def _run(args) -> int:
    from . import experiment  # deferred: keeps --help fast

    cfg = load_config(args.config)
    out = args.out if args.out is not None else cfg.output_dir
    if args.command == "verify-lemmas":
        path, ok = experiment.verify_lemmas(cfg, out)
        print(path)
        if not ok:
            print("verify-lemmas: a gated check failed; see 'checks' in the report", file=sys.stderr)
            return EXIT_CHECK
        return EXIT_OK
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed: must be non-negative")
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    for path in experiment.run_seeds(args.command, cfg, seeds, out):
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as err:
        print(f"udarts: invalid config: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DataFormatError, NonFiniteError, OSError) as err:
        print(f"udarts: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001 - any other failure is a runtime failure
        logging.getLogger("udarts").debug("unhandled error", exc_info=True)
        print(f"udarts: runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
