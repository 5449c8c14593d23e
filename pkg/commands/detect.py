"""leakwatch detect: reconstruction error, CUSUM and alarms over the evaluation window."""

import logging
from argparse import Namespace

from commands.common import add_override_flags, header, load_config, load_fitted, output_dir
from utils.artifacts import write_csv
from utils.evaluation import demand_recovery, run_variant, write_detection_report
from utils.pipeline_config import load_scenario_data

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('detect', help='run leak detection and write the alarm log')
    add_override_flags(parser)
    parser.add_argument('--model', help='model.json or coefficients.json from train (calibrates when omitted)')
    parser.set_defaults(handler=cmd_detect)


def cmd_detect(args: Namespace) -> int:
    pipeline = load_config(args)
    out = output_dir(args, pipeline)
    data = load_scenario_data(pipeline)
    fitted = load_fitted(args.model).fitted if args.model else None

    run = run_variant(pipeline.variant, data, pipeline.run_settings(), pipeline.seed, fitted=fitted)
    meta = header(args, pipeline.to_dict(), pipeline.seed)
    meta['delta'] = pipeline.cusum.delta
    meta['epsilon'] = pipeline.cusum.epsilon
    write_detection_report(out, run, meta, pipeline.ttd_unit)
    recovered = demand_recovery(run, data)
    if recovered:
        write_csv(out / 'demand_recovery.csv', ['estimate', 'truth', 'r2'], recovered, meta)
        for estimate, truth_id, r2 in recovered:
            logger.info('demand %s matches %s (R2 %.3f)', estimate, truth_id, r2)

    outcome = run.outcome
    alarm = outcome.alarm
    summary = f'{outcome.variant}: {outcome.classification}'
    if alarm is not None:
        summary += f', first alarm {alarm.timestamp.isoformat()} on {alarm.series_id}'
    if outcome.ttd is not None:
        summary += f', TTD {outcome.ttd}'
    print(summary)
    return 0
