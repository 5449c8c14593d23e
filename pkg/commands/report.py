"""leakwatch report: re-render figures and tables from a finished run directory."""

import logging
from argparse import Namespace
from pathlib import Path

import numpy as np
import pandas as pd

from utils import plots
from utils.artifacts import read_json, write_csv
from utils.errors import DataError
from utils.evaluation import COMPARISON_COLUMNS
from utils.ingest import to_utc

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser('report', help='re-render plots and tables from stored run artifacts')
    parser.add_argument('run_dir', help='directory written by detect, uq or sweep')
    parser.set_defaults(handler=cmd_report)


def _read_table(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment='#', float_precision='round_trip')


def _stored_header(document: dict) -> dict:
    return document.get('provenance', {})


def render_trace(run_dir: Path) -> Path:
    report = read_json(run_dir / 'report.json')
    trace = _read_table(run_dir / 'trace.csv')
    series_ids = list(dict.fromkeys(trace['series_id']))
    stamps = pd.to_datetime(trace.loc[trace['series_id'] == series_ids[0], 'timestamp'], utc=True)
    mre = np.stack([trace.loc[trace['series_id'] == s, 'mre'].to_numpy() for s in series_ids])
    stat = np.stack([trace.loc[trace['series_id'] == s, 'statistic'].to_numpy() for s in series_ids])
    leak_start = to_utc(report['leak_start']) if report.get('leak_start') else None
    return plots.plot_detection_trace(
        run_dir / 'trace.svg', stamps, mre, stat, series_ids,
        epsilon=report['detection']['epsilon'], leak_start=leak_start,
    )


def render_uq(run_dir: Path) -> Path:
    summary = read_json(run_dir / 'uq.json')
    unit = (summary.get('ttd') or {}).get('unit', 'hours')
    outcomes = _read_table(run_dir / 'outcomes.csv')
    seconds = outcomes['ttd_seconds'].dropna().to_numpy()
    scale = 3600.0 if unit == 'hours' else 86400.0
    return plots.plot_ttd_distribution(run_dir / 'ttd.svg', list(seconds / scale), unit)


def render_sweep(run_dir: Path) -> dict:
    table = _read_table(run_dir / 'sweep.csv')
    rows = [
        [r.delta, r.epsilon, None if pd.isna(r.avg_ttd_seconds) else r.avg_ttd_seconds,
         None if pd.isna(r.f1) else r.f1, r.tp, r.fp, r.fn, r.pareto]
        for r in table.itertuples()
    ]
    return plots.plot_sweep(run_dir, rows)


def render_comparison(run_dir: Path) -> Path:
    document = read_json(run_dir / 'comparison.json')
    rows = [[row[c] for c in COMPARISON_COLUMNS] for row in document['rows']]
    return write_csv(run_dir / 'comparison.csv', COMPARISON_COLUMNS, rows, _stored_header(document))


def cmd_report(args: Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise DataError(f'run directory not found: {run_dir}')

    rendered = []
    renderers = (
        ('report.json', render_trace),
        ('uq.json', render_uq),
        ('sweep.csv', render_sweep),
        ('comparison.json', render_comparison),
    )
    for marker, render in renderers:
        if (run_dir / marker).exists():
            render(run_dir)
            rendered.append(marker)
    if not rendered:
        raise DataError(f'{run_dir} holds no detect, uq, sweep or comparison artifacts')
    print(f"Report re-rendered from {', '.join(rendered)} in {run_dir}")
    return 0
