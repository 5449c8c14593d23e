"""leakwatch synth: generate a labeled scenario."""

import logging
from argparse import Namespace

from commands.common import output_dir
from utils.synth import (
    generate, generate_detectable, load_scenario_spec, reference_scenario, write_scenario,
)

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('synth', help='generate a synthetic scenario (panel, truth, spec echo)')
    source = parser.add_mutually_exclusive_group()
    source.add_argument('--spec', help='scenario spec YAML')
    source.add_argument('--reference', choices=['abrupt', 'incipient', 'none'], default=None,
                        help='canned dmaC-like scenario with the given leak variant')
    parser.add_argument('--weeks', type=int, default=8, help='reference scenario length in weeks')
    parser.add_argument('--irregular', type=int, default=3, help='reference irregular demand channels')
    parser.add_argument('--noise', type=float, default=0.01, help='reference noise sigma [m]')
    parser.add_argument('--seed', type=int, help='scenario seed (overrides the spec)')
    parser.add_argument('--out', help='output directory')
    parser.set_defaults(handler=cmd_synth)


def cmd_synth(args: Namespace) -> int:
    if args.spec:
        spec = load_scenario_spec(args.spec)
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
    else:
        leak = None if args.reference == 'none' else (args.reference or 'abrupt')
        spec = reference_scenario(leak=leak, weeks=args.weeks, irregular=args.irregular,
                                  noise_sigma=args.noise, seed=args.seed or 0)

    if spec.leaks:
        truth, spec = generate_detectable(spec)
    else:
        truth = generate(spec)
    paths = write_scenario(truth, spec, output_dir(args))
    print(f"Scenario written: {paths['panel']} ({truth.panel.length} samples, seed {spec.seed})")
    return 0
