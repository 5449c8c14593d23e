"""leakwatch uq: repeated calibrations, outcome counts and the TTD distribution."""

import logging
from argparse import Namespace

from commands.common import add_override_flags, header, load_config, output_dir, save_fitted
from utils.evaluation import compare_variants, uncertainty_quantification, write_comparison, write_uq_report
from utils.pipeline_config import load_scenario_data

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('uq', help='uncertainty quantification over uq.runs seeds (models kept in models/)')
    add_override_flags(parser)
    parser.add_argument('--compare', action='store_true',
                        help='also run PINN, BASE and FK over the same seeds and write comparison tables')
    parser.set_defaults(handler=cmd_uq)


def cmd_uq(args: Namespace) -> int:
    pipeline = load_config(args)
    out = output_dir(args, pipeline)
    data = load_scenario_data(pipeline)
    settings = pipeline.run_settings()
    seeds = pipeline.uq_seeds
    meta = header(args, pipeline.to_dict(), pipeline.seed)

    result = uncertainty_quantification(data, settings, seeds, pipeline.variant, pipeline.jobs)
    write_uq_report(out, result, meta, pipeline.ttd_unit)
    for run in result.runs:
        seed = run.outcome.seed
        save_fitted(run.model or run.coefficients, out / 'models' / f'{result.variant}-seed{seed}.json',
                    result.variant, header(args, pipeline.to_dict(), seed))
    m = result.metrics
    fmt = lambda v: 'undefined' if v is None else f'{v:.4f}'
    print(f"{result.variant} over {len(seeds)} runs: TP {result.counts['TP']}, FP {result.counts['FP']}, "
          f"FN {result.counts['FN']}; precision {fmt(m.precision)}, recall {fmt(m.recall)}, F1 {fmt(m.f1)}")

    if args.compare:
        rows = compare_variants([(data, s) for s in seeds], settings, jobs=pipeline.jobs)
        write_comparison(out, rows, meta, pipeline.ttd_unit)
        for row in rows:
            print('  ' + ', '.join(str(v) for v in row.to_row(pipeline.ttd_unit)))
    return 0
