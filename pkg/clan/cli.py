#!/usr/bin/env python3
"""
Command-line entry point.

    clan train     --config config/desk.cfg [--out DIR]
    clan eval      --config config/desk.cfg --checkpoint runs/desk/checkpoint.clan [--branches G,G+P,all]
    clan viz       --config config/desk.cfg --checkpoint runs/desk/checkpoint.clan --sample 3 [--out DIR]
    clan gradcheck --config config/gradcheck.cfg

Exit codes: 0 ok, 1 gradient check failed, 2 bad config / usage /
incompatible checkpoint, 3 numeric divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from clan.config import RunConfig, load_config
from clan.data import load_or_generate
from clan.errors import ClanError, NumericError
from clan.gradcheck import GradCheck, run_gradient_suite
from clan.model import default_subsets, model_complexity
from clan.tensor import set_precision
from clan.trainer import Trainer, evaluate, load_model
from clan.viz import export_attention

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

LOG_FILE = 'clan_run.log'

logger = logging.getLogger(__name__)


def setup_logging(log_dir: Optional[Path] = None) -> None:
    """INFO to stderr, plus a run log file when a directory is given."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_dir / LOG_FILE))
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    set_precision(config.precision)
    return config


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    out_dir = Path(args.out or config.output_dir)
    setup_logging(out_dir)
    logger.info(f"🚀 Training from {args.config} into {out_dir}")

    trainer = Trainer(config, out_dir)
    complexity = model_complexity(trainer.model)
    print(' '.join(f"{key}={value}" for key, value in complexity.items()))

    records = trainer.run()
    final = records[-1]
    logger.info(
        f"✅ Finished {final.epoch} epochs, train_loss={final.train_loss:.4f}, "
        f"checkpoint at {trainer.checkpoint_path}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load(args)
    model = load_model(config, Path(args.checkpoint))
    subsets = (
        [s.strip() for s in args.branches.split(',') if s.strip()]
        if args.branches
        else default_subsets(model.branch_names)
    )
    samples = load_or_generate(config.data, 'test', config.cache_dir or None)
    accuracies = evaluate(model, samples, subsets)

    for subset, accuracy in accuracies.items():
        print(f"subset={subset} accuracy={accuracy!r}")
    logger.info(f"📊 Evaluated {len(subsets)} branch subset(s) on {len(samples)} test samples")
    return EXIT_OK


def cmd_viz(args: argparse.Namespace) -> int:
    config = _load(args)
    model = load_model(config, Path(args.checkpoint))
    samples = load_or_generate(config.data, 'test', config.cache_dir or None)
    if not 0 <= args.sample < len(samples):
        logger.error(f"❌ Sample index {args.sample} outside [0, {len(samples)})")
        return EXIT_USAGE

    out_dir = Path(args.out or Path(config.output_dir) / 'viz')
    for path in export_attention(model, samples[args.sample], args.sample, out_dir):
        print(f"wrote={path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    if config.precision != 'f64':
        logger.error("❌ Gradient checks run in 64-bit precision; set run.precision = f64")
        return EXIT_USAGE
    set_precision('f64')

    def report(check: GradCheck) -> None:
        status = 'ok' if check.passed else 'FAIL'
        print(
            f"check={check.name} max_rel_error={check.max_rel_error:.3e} "
            f"threshold={check.threshold:.0e} status={status}"
        )

    results = run_gradient_suite(seed=config.seed, progress=report)
    failures = [c for c in results if not c.passed]
    if failures:
        logger.error(f"❌ {len(failures)} of {len(results)} gradient checks failed:")
        for check in failures:
            logger.error(f"   - {check.name}: {check.max_rel_error:.3e} >= {check.threshold:.0e}")
        return EXIT_CHECK_FAILED
    logger.info(f"✅ All {len(results)} gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='clan',
        description='Cross-layer attention network: train, evaluate, visualise, gradient-check',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Environment:
  CLAN_PRECISION=f32|f64   overrides run.precision (also read from .env)

Examples:
  clan train --config config/desk.cfg
  clan eval --config config/desk.cfg --checkpoint runs/desk/checkpoint.clan --branches G,G+P+A,all
  clan viz --config config/desk.cfg --checkpoint runs/desk/checkpoint.clan --sample 0
        """,
    )
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', help='Train a model and write CSV + checkpoints')
    train.add_argument('--config', required=True, help='Run configuration file')
    train.add_argument('--out', help='Output directory (default: run.output_dir)')
    train.set_defaults(handler=cmd_train)

    evaluate_cmd = sub.add_parser('eval', help='Accuracy per branch subset on the test split')
    evaluate_cmd.add_argument('--config', required=True, help='Run configuration file')
    evaluate_cmd.add_argument('--checkpoint', required=True, help='Checkpoint (.clan) to load')
    evaluate_cmd.add_argument(
        '--branches', help="Comma-separated subset expressions, e.g. 'G,G+P,all'"
    )
    evaluate_cmd.set_defaults(handler=cmd_eval)

    viz = sub.add_parser('viz', help='Export CLSA attention maps of one test sample as PPM')
    viz.add_argument('--config', required=True, help='Run configuration file')
    viz.add_argument('--checkpoint', required=True, help='Checkpoint (.clan) to load')
    viz.add_argument('--sample', type=int, default=0, help='Test sample index')
    viz.add_argument('--out', help='Output directory (default: <run.output_dir>/viz)')
    viz.set_defaults(handler=cmd_viz)

    gradcheck = sub.add_parser('gradcheck', help='Finite-difference gradient suite')
    gradcheck.add_argument('--config', help='Run configuration file (seed, precision)')
    gradcheck.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        return args.handler(args)
    except NumericError as e:
        logger.error(f"💥 Numeric divergence: {e}")
        return EXIT_DIVERGED
    except (ClanError, FileNotFoundError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
