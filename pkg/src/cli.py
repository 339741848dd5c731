"""
Command Line Interface
``python -m src <subcommand>`` front-end over the experiment commands.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from . import __version__
from .config import apply_overrides, load_config
from .errors import DmlBnnError, NonFiniteError
from .experiments import cmd_compare, cmd_eval, cmd_make_data, cmd_pretrain, cmd_train
from .gradient_suite import format_table, run_gradient_suite

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = 'DMLBNN_LOG_LEVEL'
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INPUT = 2


def configure_logging() -> None:
    level_name = os.getenv(LOG_LEVEL_ENV, 'INFO').upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--config', default=None, help='JSON or YAML run configuration')
    parser.add_argument('--seed', type=int, default=None, help='run a single seed instead of the configured list')
    parser.add_argument('--out', default=None, help='output directory')
    parser.add_argument('--dry-run', action='store_true', help='validate and print the plan without writing files')
    parser.add_argument('--samples', type=int, default=None, help='posterior samples per ensemble prediction')
    parser.add_argument('--metric', choices=['w2', 'kl'], default=None, help='posterior distance')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='dmlbnn',
                                     description='Diversity-promoted mutual learning for variational BNNs')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    for name, help_text in (('train', 'two-stage training of the full method'),
                            ('compare', 'vanilla / DML / full method (plus DNN baseline) under matched seeds'),
                            ('pretrain-deterministic', 'train the point network used to initialise B2'),
                            ('make-data', 'write the train / validation splits as CSV')):
        _add_common(sub.add_parser(name, help=help_text))

    eval_parser = sub.add_parser('eval', help='ensemble metrics of a saved checkpoint')
    _add_common(eval_parser)
    eval_parser.add_argument('--checkpoint', required=True, help='checkpoint file to evaluate')

    grad_parser = sub.add_parser('gradcheck', help='finite-difference check of every loss term')
    grad_parser.add_argument('--seed', type=int, default=0)
    grad_parser.add_argument('--tol', type=float, default=1e-4)
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == 'gradcheck':
        rows = run_gradient_suite(seed=args.seed, tol=args.tol)
        print(format_table(rows))
        return EXIT_OK if all(r.passed for r in rows) else EXIT_FAILED

    config = apply_overrides(load_config(args.config), seed=args.seed, out=args.out, samples=args.samples,
                             metric=args.metric)
    if args.command == 'train':
        report = cmd_train(config, dry_run=args.dry_run)
    elif args.command == 'compare':
        report = cmd_compare(config, dry_run=args.dry_run)
    elif args.command == 'eval':
        metrics = cmd_eval(config, args.checkpoint, dry_run=args.dry_run)
        if metrics is not None:
            print(f"acc {metrics.acc:.4f}  nll {metrics.nll:.4f}  ece {metrics.ece:.4f}  S={metrics.samples}")
        return EXIT_OK
    elif args.command == 'pretrain-deterministic':
        cmd_pretrain(config, dry_run=args.dry_run)
        return EXIT_OK
    else:
        cmd_make_data(config, dry_run=args.dry_run)
        return EXIT_OK

    if report is None:
        return EXIT_OK
    print(f"status {report.status}; results in {config.output_dir}")
    return EXIT_OK if report.status == 'ok' else EXIT_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv`` and run the command; returns the process exit status"""
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except DmlBnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
