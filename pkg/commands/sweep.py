"""leakwatch sweep: delta/epsilon sensitivity over a population of runs, with Pareto flags."""

import logging
from argparse import Namespace

from joblib import Parallel, delayed

from commands.common import add_override_flags, header, load_config, load_stored_models, output_dir
from utils.evaluation import pareto_cells, run_variant, sensitivity_sweep, write_sweep_report
from utils.pipeline_config import load_scenario_data

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('sweep', help='sensitivity sweep over the sweep.deltas x sweep.epsilons grid')
    add_override_flags(parser)
    parser.add_argument('--models', help='models/ directory written by uq (calibrates one model per seed when omitted)')
    parser.set_defaults(handler=cmd_sweep)


def cmd_sweep(args: Namespace) -> int:
    pipeline = load_config(args)
    out = output_dir(args, pipeline)
    data = load_scenario_data(pipeline)
    settings = pipeline.run_settings()

    if args.models:
        stored = load_stored_models(args.models)
        logger.info('sweeping %d stored models from %s', len(stored), args.models)
        jobs = [(m.variant, m.seed or 0, m.fitted) for m in stored]
    else:
        jobs = [(pipeline.variant, s, None) for s in pipeline.uq_seeds]
    runs = Parallel(n_jobs=pipeline.jobs)(
        delayed(run_variant)(variant, data, settings, seed, fitted) for variant, seed, fitted in jobs
    )
    cells = sensitivity_sweep(runs, pipeline.sweep.deltas, pipeline.sweep.epsilons)
    write_sweep_report(out, cells, header(args, pipeline.to_dict(), pipeline.seed))
    print(f'Sweep written: {len(cells)} cells over {len(runs)} runs, '
          f'{sum(pareto_cells(cells))} Pareto-optimal')
    return 0
