"""
leakwatch: leakage identification for water distribution networks.

Pairwise pressure model, physics-informed demand network and CUSUM change
point detection, wired into reproducible pipelines driven by one config file.

Usage:
    python cli.py synth --reference abrupt --out runs/scenario
    python cli.py --config config.yaml train
    python cli.py --config config.yaml detect --model runs/model.json
    python cli.py --config config.yaml uq --compare
    python cli.py --config config.yaml sweep
    python cli.py report runs/uq

Exit codes: 0 success, 1 usage/config, 2 data, 3 numeric/training.
"""

import argparse
import logging
import sys
from functools import wraps
from typing import List, Optional

from config import config
from utils.errors import ConfigError, LeakwatchError

logger = logging.getLogger('leakwatch')

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def setup_logging(level: str) -> None:
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ConfigError(f'unknown log level {level!r}')
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(numeric)


def handle_errors(f):
    @wraps(f)
    def decorated(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except LeakwatchError as e:
            logger.error('%s: %s', type(e).__name__, e)
            return e.exit_code
        except Exception as e:
            logger.exception('unexpected error: %s', e)
            return 1
    return decorated


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with the configuration exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f'{self.prog}: error: {message}\n')


def create_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog='leakwatch', description=__doc__.split('\n\n')[1])
    parser.add_argument('--config', help='pipeline config YAML')
    parser.add_argument('--log-level', default=None, help=f'logging level (default {config.LOG_LEVEL})')
    parser.add_argument('--jobs', type=int, default=None, help='parallel runs (overrides jobs)')
    parser.add_argument('--no-timestamp', action='store_true', help='omit generated_at from provenance')

    subparsers = parser.add_subparsers(dest='command', required=True)
    from commands import COMMANDS
    for command in COMMANDS:
        command.register(subparsers)
    return parser


@handle_errors
def run(args: argparse.Namespace) -> int:
    setup_logging(args.log_level or config.LOG_LEVEL)
    return args.handler(args)


def main(argv: Optional[List[str]] = None) -> int:
    parser = create_parser()
    args = parser.parse_args(argv)
    return run(args)


if __name__ == '__main__':
    sys.exit(main())
