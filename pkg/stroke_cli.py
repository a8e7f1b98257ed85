#!/usr/bin/env python3
"""
Command-Line Interface for the PPG Stroke Early-Warning Pipeline
Run single stages or the whole chain from a JSON config
"""

import argparse
import logging
import os
import sys
import time

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from pipeline import STAGES, ConfigError, Pipeline, StageError, load_config

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_USAGE = 2


def progress_callback(current, total):
    """Progress callback for long stages"""
    percent = (current / total) * 100 if total else 100.0
    bar_length = 40
    filled_length = int(bar_length * current // total) if total else bar_length
    bar = '█' * filled_length + '-' * (bar_length - filled_length)

    print(f'\r🔄 Progress: |{bar}| {percent:.1f}% ({current}/{total})', end='', flush=True)

    if current == total:
        print()  # New line when complete


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Pipeline config JSON (see data/config_schema.json)')
    common.add_argument('--window', type=float, action='append', metavar='MIN',
                        help='Warning window T_w in minutes; repeat for several windows')
    common.add_argument('--seed', type=int, help='Seed for every random stream (overrides the config)')
    common.add_argument('--jobs', type=int, help='Worker cap for per-patient and per-coalition work')
    common.add_argument('--out', help='Output directory (overrides paths.output)')
    common.add_argument('--quiet', '-q', action='store_true', help='Only warnings and errors')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(
        description='PPG stroke early-warning pipeline - synthetic cohorts, biomarkers, ResNet-1D, attribution',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python stroke_cli.py run-all --config data/demo_config.json             # Full synthetic benchmark
  python stroke_cli.py synth --config data/demo_config.json --out runs/a  # Only write the cohort
  python stroke_cli.py eval --config data/graded_config.json \\
      --window 240 --window 300 --window 360                               # One metric row per window
  STROKEWARN_TRAIN__EPOCHS=10 python stroke_cli.py train --config data/demo_config.json
        """
    )
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True
    for stage in STAGES + ('run-all',):
        sub = commands.add_parser(stage, parents=[common], help=f"Run the {stage} stage" if stage != 'run-all'
                                  else 'Run every stage in order')
        if stage in ('extract', 'run-all'):
            sub.add_argument('--preview', action='store_true', help='Save a PNG of the first beats with their fiducials')
            sub.add_argument('--debug-fiducials', action='store_true', help='Dump fiducial sample indices per patient as CSV')
    return parser


def configure_logging(quiet: bool, verbose: bool):
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', force=True)


def cli_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
        overrides['train'] = {'seed': args.seed}
    if args.jobs is not None:
        overrides['jobs'] = args.jobs
    if args.out:
        overrides['paths'] = {'output': args.out}
    if args.window:
        overrides['labels'] = {'windows': list(args.window)}
    features = {}
    if getattr(args, 'preview', False):
        features['preview'] = True
    if getattr(args, 'debug_fiducials', False):
        features['debug_fiducials'] = True
    if features:
        overrides['features'] = features
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.quiet, args.verbose)

    try:
        config = load_config(args.config, overrides=cli_overrides(args))
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        return EXIT_USAGE

    if not args.quiet:
        print("🚀 PPG Stroke Early-Warning Pipeline")
        print("=" * 40)
        print(f"📂 Output: {config.paths.output}")
        print(f"🎲 Seed: {config.seed}  🔑 Config hash: {config.config_hash()[:12]}")

    pipeline = Pipeline(config)
    if not args.quiet:
        pipeline.set_progress_callback(progress_callback)

    start_time = time.time()
    try:
        if args.command == 'run-all':
            pipeline.run_all(on_stage=None if args.quiet else lambda stage: print(f"▶️  {stage}"))
        else:
            pipeline.run_stage(args.command)
    except StageError as e:
        print(f"\n❌ {e}")
        return EXIT_STAGE_FAILED
    except ConfigError as e:
        print(f"\n❌ Config error: {e}")
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n⚠️  Process interrupted by user")
        return EXIT_STAGE_FAILED

    if not args.quiet:
        table = os.path.join(config.paths.output, 'eval', 'table.txt')
        if args.command in ('eval', 'run-all') and os.path.exists(table):
            with open(table, 'r', encoding='utf-8') as f:
                print(f.read())
        print(f"✅ {args.command} finished")
        print(f"⏱️  Processing time: {time.time() - start_time:.2f} seconds")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
