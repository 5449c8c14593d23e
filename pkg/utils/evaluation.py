"""
Leak identification experiments.

A run fits the pairwise model on the training window, optionally trains the
demand network, computes the reconstruction error over training plus
evaluation windows, standardizes it with the training-window statistics and
runs CUSUM over the evaluation window. The first alarm governs the outcome:

    TP     first alarm at or after the leak start
    FP     first alarm before the leak start (or any alarm without a leak)
    FN     a leak and no alarm
    CLEAN  no leak and no alarm

Variants:
    PINN   measured channels from the panel, latent channels from the network
    BASE   measured channels only
    FK     measured channels plus the true latent channels
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from utils import plots
from utils.artifacts import write_csv, write_json
from utils.cpd import (
    Alarm, DetectionResult, alarm_log_rows, cusum_statistics, detect, first_alarm_indices,
    fit_standardization, format_ttd, make_configs, time_to_detection,
)
from utils.demand_net import NetworkParams, TrainedModel, estimate_demands, match_channels, train
from utils.errors import ConfigError, ContractError, ValidationError
from utils.ingest import PressurePanel, slice_window, to_utc
from utils.regression import (
    CoefficientSet, MRE_MODES, MreSeries, assemble_demands, fit_ols,
    model_reconstruction_error, predict_pressure,
)

logger = logging.getLogger(__name__)

VARIANTS = ('PINN', 'BASE', 'FK')
CLASSES = ('TP', 'FP', 'FN', 'CLEAN')


@dataclass(frozen=True)
class ScenarioData:
    """A panel with its windows, the leak start and optional truth channels."""
    panel: PressurePanel
    training_start: datetime
    training_end: datetime
    evaluation_end: Optional[datetime] = None
    leak_start: Optional[datetime] = None
    leak_id: str = 'leak'
    truth_ids: Tuple[str, ...] = ()
    truth_demands: Optional[np.ndarray] = field(default=None, repr=False)
    leak_flow: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'training_start', to_utc(self.training_start))
        object.__setattr__(self, 'training_end', to_utc(self.training_end))
        end = self.panel.axis.end if self.evaluation_end is None else to_utc(self.evaluation_end)
        object.__setattr__(self, 'evaluation_end', end)
        if self.leak_start is not None:
            object.__setattr__(self, 'leak_start', to_utc(self.leak_start))

        if not self.training_start < self.training_end < self.evaluation_end:
            raise ValidationError('training window must precede the evaluation window')
        if self.leak_start is not None and self.leak_start < self.training_end:
            raise ValidationError(
                f'leak {self.leak_id!r} starts at {self.leak_start.isoformat()}, inside the training window'
            )
        if self.truth_demands is not None:
            shape = (len(self.truth_ids), self.panel.length)
            if np.shape(self.truth_demands) != shape:
                raise ContractError(f'truth demands must be {shape[0]}×{shape[1]}')

    @classmethod
    def from_truth(cls, truth, spec) -> 'ScenarioData':
        """From a generated scenario: the spec's training head, then the rest."""
        return cls(
            panel=truth.panel,
            training_start=spec.start,
            training_end=spec.training_end,
            leak_start=truth.leak_start,
            leak_id=truth.leak_ids[0] if truth.leak_ids else 'leak',
            truth_ids=truth.irregular_ids,
            truth_demands=truth.irregular_demands,
            leak_flow=truth.leak_flow,
        )

    @property
    def offset(self) -> int:
        return self.panel.axis.index_of(self.training_start)

    def analysis_panel(self) -> PressurePanel:
        return slice_window(self.panel, self.training_start, self.evaluation_end)

    def training_panel(self) -> PressurePanel:
        return slice_window(self.panel, self.training_start, self.training_end)

    def training_length(self) -> int:
        return self.panel.axis.index_of(self.training_end, allow_end=True) - self.offset

    def truth_window(self) -> np.ndarray:
        if self.truth_demands is None:
            raise ContractError('the FK variant needs the true latent demand channels')
        i0 = self.offset
        i1 = self.panel.axis.index_of(self.evaluation_end, allow_end=True)
        return np.asarray(self.truth_demands)[:, i0:i1]


@dataclass(frozen=True)
class RunSettings:
    network: NetworkParams = NetworkParams()
    delta: float = 1.0
    epsilon: float = 300.0
    mode: str = 'per-pair'
    reference: int = 0

    def __post_init__(self):
        if self.mode not in MRE_MODES:
            raise ConfigError(f'mode must be one of {MRE_MODES}, got {self.mode!r}')


@dataclass(frozen=True)
class RunOutcome:
    variant: str
    seed: int
    classification: str
    ttd: Optional[timedelta] = None
    alarm: Optional[Alarm] = None
    leak_id: str = 'leak'

    def __post_init__(self):
        if self.classification not in CLASSES:
            raise ValueError(f'unknown classification {self.classification!r}')
        if (self.ttd is not None) != (self.classification == 'TP'):
            raise ValueError('ttd is present exactly for TP outcomes')
        if self.ttd is not None and self.ttd < timedelta(0):
            raise ValueError('ttd must be non-negative')

    def to_row(self) -> list:
        return [
            self.variant, self.seed, self.leak_id, self.classification,
            None if self.ttd is None else self.ttd.total_seconds(),
            None if self.alarm is None else self.alarm.timestamp.isoformat(),
            None if self.alarm is None else self.alarm.series_id,
        ]


OUTCOME_COLUMNS = ['variant', 'seed', 'leak_id', 'classification', 'ttd_seconds', 'alarm_time', 'alarm_series']


def classify(alarm_time: Optional[datetime], leak_start: Optional[datetime]) -> Tuple[str, Optional[timedelta]]:
    if alarm_time is None:
        return ('FN' if leak_start is not None else 'CLEAN'), None
    if leak_start is None:
        return 'FP', None
    if alarm_time < leak_start:
        return 'FP', None
    return 'TP', time_to_detection(alarm_time, leak_start)


@dataclass(frozen=True)
class Metrics:
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def to_dict(self) -> dict:
        return {'precision': self.precision, 'recall': self.recall, 'f1': self.f1}


def classification_metrics(tp: int, fp: int, fn: int) -> Metrics:
    """Precision, recall and F1; a metric whose denominator is zero is None."""
    if min(tp, fp, fn) < 0:
        raise ValueError('counts must be non-negative')
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    f1 = 2 * tp / (2 * tp + fn + fp) if 2 * tp + fn + fp else None
    return Metrics(precision, recall, f1)


def count_outcomes(outcomes: Sequence[RunOutcome]) -> Dict[str, int]:
    counts = {c: 0 for c in CLASSES}
    for o in outcomes:
        counts[o.classification] += 1
    return counts


@dataclass(frozen=True)
class VariantRun:
    """One executed run: the outcome plus everything needed to re-threshold it."""
    outcome: RunOutcome
    coefficients: CoefficientSet
    mre: MreSeries = field(repr=False)
    detection: DetectionResult = field(repr=False)
    leak_start: Optional[datetime] = None
    model: Optional[TrainedModel] = field(default=None, repr=False)
    demand_estimates: Optional[np.ndarray] = field(default=None, repr=False)
    means: Optional[np.ndarray] = None
    stds: Optional[np.ndarray] = None


Fitted = Union[CoefficientSet, TrainedModel]


def fit_variant(variant: str, data: ScenarioData, settings: RunSettings = RunSettings(), seed: int = 0) -> Fitted:
    """
    Calibrate a variant on the training window.

    BASE and FK return OLS coefficients (FK with the true latent channels
    treated as measured); PINN returns the trained demand network.
    """
    training = data.training_panel()
    if variant == 'BASE':
        return fit_ols(training, reference=settings.reference)
    if variant == 'FK':
        n_train = data.training_length()
        ids = tuple(training.demand_ids) + tuple(data.truth_ids)
        flows = np.vstack([training.demands, data.truth_window()[:, :n_train]])
        return fit_ols(training, known_demand_ids=ids, reference=settings.reference, demands=flows)
    if variant == 'PINN':
        base = fit_ols(training, reference=settings.reference)
        return train(training, base, settings.network, seed=seed)
    raise ConfigError(f'unknown variant {variant!r}; expected one of {VARIANTS}')


def _variant_demands(variant: str, fitted: Fitted, data: ScenarioData, panel: PressurePanel):
    if isinstance(fitted, TrainedModel):
        estimates = estimate_demands(fitted, panel)
        coeffs = fitted.coefficients
        return coeffs, assemble_demands(coeffs, panel, estimates), fitted, estimates
    if variant == 'PINN':
        raise ContractError('the PINN variant needs a trained demand network, not bare coefficients')
    if variant == 'FK':
        truth = data.truth_window()
        rows = [
            panel.demand_matrix([d])[0] if d in panel.demand_ids else truth[data.truth_ids.index(d)]
            for d in fitted.demand_ids
        ]
        flows = np.vstack(rows) if rows else np.zeros((0, panel.length))
        return fitted, flows, None, None
    return fitted, assemble_demands(fitted, panel), None, None


def run_variant(
    variant: str,
    data: ScenarioData,
    settings: RunSettings = RunSettings(),
    seed: int = 0,
    fitted: Optional[Fitted] = None,
) -> VariantRun:
    """
    Fit, (train), predict, compute the MRE, detect and classify.

    A previously calibrated model can be passed as `fitted` to skip calibration.

    Raises:
        ContractError: FK without truth channels, or a model for other sensors.
        ConfigError: unknown variant or a zero-variance training series.
    """
    panel = data.analysis_panel()
    if fitted is None:
        fitted = fit_variant(variant, data, settings, seed)
    coeffs, demands, model, estimates = _variant_demands(variant, fitted, data, panel)

    estimate = predict_pressure(coeffs, panel, demands)
    mre = model_reconstruction_error(panel, estimate, settings.mode)
    n_train = data.training_length()
    means, stds = fit_standardization(mre.reduced[:, :n_train], mre.series_ids)
    logger.info('%s standardization: mean %s, std %s', variant,
                np.array2string(means, precision=4), np.array2string(stds, precision=4))

    configs = make_configs(settings.delta, settings.epsilon, means, stds)
    detection = detect(mre, configs, start=n_train)
    alarm = detection.first_alarm
    classification, ttd = classify(alarm.timestamp if alarm else None, data.leak_start)
    outcome = RunOutcome(variant=variant, seed=seed, classification=classification,
                         ttd=ttd, alarm=alarm, leak_id=data.leak_id)
    logger.info('%s seed %d: %s%s', variant, seed, classification,
                f' after {format_ttd(ttd):.1f} h' if ttd is not None else '')
    return VariantRun(outcome=outcome, coefficients=coeffs, mre=mre, detection=detection,
                      leak_start=data.leak_start, model=model, demand_estimates=estimates,
                      means=means, stds=stds)


@dataclass(frozen=True)
class TtdSummary:
    count: int
    minimum: timedelta
    q1: timedelta
    median: timedelta
    mean: timedelta
    q3: timedelta
    maximum: timedelta

    def to_dict(self, unit: str = 'hours') -> dict:
        data = {'count': self.count, 'unit': unit}
        for name in ('minimum', 'q1', 'median', 'mean', 'q3', 'maximum'):
            data[name] = format_ttd(getattr(self, name), unit)
        return data


def summarize_ttd(durations: Sequence[timedelta]) -> Optional[TtdSummary]:
    """Distribution summary of detection times; None without detections."""
    if not durations:
        return None
    seconds = np.array([d.total_seconds() for d in durations])
    q1, median, q3 = np.percentile(seconds, [25, 50, 75])
    as_td = lambda s: timedelta(seconds=float(s))
    return TtdSummary(
        count=len(seconds), minimum=as_td(seconds.min()), q1=as_td(q1), median=as_td(median),
        mean=as_td(seconds.mean()), q3=as_td(q3), maximum=as_td(seconds.max()),
    )


@dataclass(frozen=True)
class UqResult:
    variant: str
    runs: List[VariantRun] = field(repr=False)
    counts: Dict[str, int]
    metrics: Metrics
    ttd: Optional[TtdSummary]

    @property
    def outcomes(self) -> List[RunOutcome]:
        return [r.outcome for r in self.runs]

    def to_dict(self, unit: str = 'hours') -> dict:
        return {
            'variant': self.variant,
            'runs': len(self.runs),
            'counts': self.counts,
            'metrics': self.metrics.to_dict(),
            'ttd': None if self.ttd is None else self.ttd.to_dict(unit),
        }


def _run_job(variant: str, data: ScenarioData, settings: RunSettings, seed: int) -> VariantRun:
    return run_variant(variant, data, settings, seed)


def uncertainty_quantification(
    data: ScenarioData,
    settings: RunSettings,
    seeds: Sequence[int],
    variant: str = 'PINN',
    jobs: int = 1,
) -> UqResult:
    """
    Repeat a variant over distinct seeds and aggregate the outcomes.

    Runs are independent and execute through joblib with up to `jobs` workers.
    The TTD distribution covers TP runs only.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError('uncertainty quantification needs at least one run')
    if len(set(seeds)) != len(seeds):
        raise ConfigError('uncertainty quantification seeds must be distinct')

    runs = Parallel(n_jobs=jobs)(delayed(_run_job)(variant, data, settings, s) for s in seeds)
    outcomes = [r.outcome for r in runs]
    counts = count_outcomes(outcomes)
    metrics = classification_metrics(counts['TP'], counts['FP'], counts['FN'])
    summary = summarize_ttd([o.ttd for o in outcomes if o.ttd is not None])
    logger.info('UQ %s over %d runs: TP %d, FP %d, FN %d', variant, len(runs),
                counts['TP'], counts['FP'], counts['FN'])
    return UqResult(variant=variant, runs=list(runs), counts=counts, metrics=metrics, ttd=summary)


@dataclass(frozen=True)
class SweepCell:
    delta: float
    epsilon: float
    avg_ttd: Optional[timedelta]
    f1: Optional[float]
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if (self.avg_ttd is not None) != (self.tp > 0):
            raise ValueError('avg_ttd is defined exactly when there are true positives')


def _sweep_outcomes(run: VariantRun, deltas: np.ndarray, epsilons: np.ndarray) -> List[List[Tuple[str, Optional[timedelta]]]]:
    axis = run.detection.axis
    z = run.detection.standardized
    s_plus, s_minus = cusum_statistics(z[None, :, :], deltas[:, None])
    combined = np.maximum(s_plus, s_minus).max(axis=1)
    grid = []
    for k in range(len(deltas)):
        row = []
        for index in first_alarm_indices(combined[k], epsilons):
            alarm_time = axis.timestamp(int(index)) if index >= 0 else None
            row.append(classify(alarm_time, run.leak_start))
        grid.append(row)
    return grid


def sensitivity_sweep(runs: Sequence[VariantRun], deltas: Sequence[float], epsilons: Sequence[float]) -> List[SweepCell]:
    """
    Re-threshold every run over a δ×ε grid.

    Statistics are recomputed once per δ for all series at once; each ε
    reuses them through the running maximum. Cells are ordered δ-major.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    epsilons = np.asarray(epsilons, dtype=np.float64)
    if deltas.size == 0 or epsilons.size == 0:
        raise ConfigError('sweep grids must not be empty')
    if not runs:
        raise ConfigError('a sweep needs at least one run')
    if deltas.min() < 0 or epsilons.min() <= 0:
        raise ConfigError('sweep grids need delta >= 0 and epsilon > 0')

    per_run = [_sweep_outcomes(run, deltas, epsilons) for run in runs]
    cells = []
    for k, delta in enumerate(deltas):
        for e, epsilon in enumerate(epsilons):
            results = [grid[k][e] for grid in per_run]
            tp = sum(1 for c, _ in results if c == 'TP')
            fp = sum(1 for c, _ in results if c == 'FP')
            fn = sum(1 for c, _ in results if c == 'FN')
            ttds = [t for _, t in results if t is not None]
            avg = timedelta(seconds=float(np.mean([t.total_seconds() for t in ttds]))) if ttds else None
            cells.append(SweepCell(delta=float(delta), epsilon=float(epsilon), avg_ttd=avg,
                                   f1=classification_metrics(tp, fp, fn).f1, tp=tp, fp=fp, fn=fn))
    logger.info('sweep: %d cells over %d runs', len(cells), len(runs))
    return cells


def pareto_front(points: Sequence[Tuple[float, float]]) -> List[bool]:
    """
    Flags for the non-dominated (ttd, f1) points, minimizing ttd and maximizing f1.

    a dominates b when ttd_a <= ttd_b and f1_a >= f1_b with one inequality strict.
    """
    order = sorted(range(len(points)), key=lambda i: (points[i][0], -points[i][1]))
    flags = [False] * len(points)
    best_before = -np.inf
    k = 0
    while k < len(order):
        ttd = points[order[k]][0]
        group = [i for i in order[k:] if points[i][0] == ttd]
        top = max(points[i][1] for i in group)
        for i in group:
            f1 = points[i][1]
            flags[i] = not (best_before >= f1 or top > f1)
        best_before = max(best_before, top)
        k += len(group)
    return flags


def pareto_cells(cells: Sequence[SweepCell]) -> List[bool]:
    """Pareto flags over cells; cells without a defined avg_ttd or f1 are never optimal."""
    defined = [i for i, c in enumerate(cells) if c.avg_ttd is not None and c.f1 is not None]
    flags = [False] * len(cells)
    front = pareto_front([(cells[i].avg_ttd.total_seconds(), cells[i].f1) for i in defined])
    for i, flag in zip(defined, front):
        flags[i] = flag
    return flags


@dataclass(frozen=True)
class VariantComparison:
    variant: str
    counts: Dict[str, int]
    median_ttd: Optional[timedelta]
    mean_ttd: Optional[timedelta]

    def to_row(self, unit: str) -> list:
        fmt = lambda d: None if d is None else format_ttd(d, unit)
        return [self.variant, self.counts['TP'], self.counts['FP'], self.counts['FN'],
                fmt(self.median_ttd), fmt(self.mean_ttd)]


def compare_variants(
    cases: Sequence[Tuple[ScenarioData, int]],
    settings: RunSettings,
    variants: Sequence[str] = VARIANTS,
    jobs: int = 1,
) -> List[VariantComparison]:
    """
    Run every variant on every (scenario, seed) case; median and mean TTD over TP runs.

    FK is skipped for cases without truth channels.
    """
    jobs_list = [
        (v, data, seed) for v in variants for data, seed in cases
        if v != 'FK' or data.truth_demands is not None
    ]
    runs = Parallel(n_jobs=jobs)(delayed(_run_job)(v, data, settings, seed) for v, data, seed in jobs_list)
    rows = []
    for v in variants:
        outcomes = [r.outcome for r in runs if r.outcome.variant == v]
        if not outcomes:
            continue
        summary = summarize_ttd([o.ttd for o in outcomes if o.ttd is not None])
        rows.append(VariantComparison(
            variant=v,
            counts=count_outcomes(outcomes),
            median_ttd=None if summary is None else summary.median,
            mean_ttd=None if summary is None else summary.mean,
        ))
    return rows


def demand_recovery(run: VariantRun, data: ScenarioData) -> List[Tuple[str, str, float]]:
    """(estimated channel, truth channel, R²) for a PINN run with truth available."""
    if run.demand_estimates is None or data.truth_demands is None:
        return []
    truth = data.truth_window()
    matched = match_channels(run.demand_estimates, truth)
    return [(run.model.unknown_ids[e], data.truth_ids[t], r2) for e, t, r2 in matched]


TRACE_COLUMNS = ['timestamp', 'series_id', 'mre', 'statistic', 'standardized']


def write_detection_report(out: Path, run: VariantRun, header: dict, unit: str = 'hours') -> Dict[str, Path]:
    """report.json, alarms.csv, trace.csv and trace.svg for one run."""
    detection = run.detection
    start = run.mre.axis.length - detection.axis.length
    stamps = [t.isoformat() for t in detection.axis.timestamps()]
    rows = []
    for k, (series_id, trace) in enumerate(detection.traces.items()):
        for t, stamp in enumerate(stamps):
            rows.append([stamp, series_id, run.mre.reduced[k, start + t], trace.statistic[t],
                         detection.standardized[k, t]])

    effective = {
        'delta': detection.configs[0].delta if detection.configs else None,
        'epsilon': detection.configs[0].epsilon if detection.configs else None,
        'mode': detection.mode,
        'standardization': {
            sid: {'mean': c.mean, 'std': c.std} for sid, c in zip(detection.traces, detection.configs)
        },
    }
    outcome = run.outcome
    payload = {
        'variant': outcome.variant,
        'seed': outcome.seed,
        'classification': outcome.classification,
        'ttd': None if outcome.ttd is None else format_ttd(outcome.ttd, unit),
        'ttd_unit': unit,
        'leak_start': None if run.leak_start is None else run.leak_start.isoformat(),
        'alarms': [
            {'timestamp': a.timestamp.isoformat(), 'series_id': a.series_id, 'statistic': a.statistic}
            for a in detection.alarms
        ],
        'detection': effective,
        'coefficients': run.coefficients.to_dict(),
    }
    paths = {
        'report': write_json(out / 'report.json', payload, header),
        'alarms': write_csv(out / 'alarms.csv', ['timestamp', 'series_id', 'statistic', 'delta', 'epsilon'],
                            alarm_log_rows(detection), header),
        'trace': write_csv(out / 'trace.csv', TRACE_COLUMNS, rows, header),
    }
    paths['plot'] = plots.plot_detection_trace(
        out / 'trace.svg', detection.axis.timestamps(), run.mre.reduced[:, start:],
        np.stack([t.statistic for t in detection.traces.values()]), list(detection.traces),
        epsilon=effective['epsilon'], leak_start=run.leak_start,
    )
    return paths


def write_uq_report(out: Path, result: UqResult, header: dict, unit: str = 'hours') -> Dict[str, Path]:
    ttds = [format_ttd(o.ttd, unit) for o in result.outcomes if o.ttd is not None]
    metrics = result.metrics
    return {
        'summary': write_json(out / 'uq.json', result.to_dict(unit), header),
        'metrics': write_csv(
            out / 'uq_metrics.csv', ['variant', 'tp', 'fp', 'fn', 'precision', 'recall', 'f1'],
            [[result.variant, result.counts['TP'], result.counts['FP'], result.counts['FN'],
              metrics.precision, metrics.recall, metrics.f1]], header),
        'outcomes': write_csv(out / 'outcomes.csv', OUTCOME_COLUMNS,
                              [o.to_row() for o in result.outcomes], header),
        'plot': plots.plot_ttd_distribution(out / 'ttd.svg', ttds, unit),
    }


SWEEP_COLUMNS = ['delta', 'epsilon', 'avg_ttd_seconds', 'f1', 'tp', 'fp', 'fn', 'pareto']


def sweep_rows(cells: Sequence[SweepCell], flags: Sequence[bool]) -> List[list]:
    return [
        [c.delta, c.epsilon, None if c.avg_ttd is None else c.avg_ttd.total_seconds(),
         c.f1, c.tp, c.fp, c.fn, int(flag)]
        for c, flag in zip(cells, flags)
    ]


def write_sweep_report(out: Path, cells: Sequence[SweepCell], header: dict) -> Dict[str, Path]:
    flags = pareto_cells(cells)
    rows = sweep_rows(cells, flags)
    paths = {
        'grid': write_csv(out / 'sweep.csv', SWEEP_COLUMNS, rows, header),
        'pareto': write_csv(out / 'pareto.csv', SWEEP_COLUMNS, [r for r in rows if r[-1]], header),
    }
    paths.update(plots.plot_sweep(out, rows))
    return paths


COMPARISON_COLUMNS = ['variant', 'tp', 'fp', 'fn', 'median_ttd', 'mean_ttd']


def write_comparison(out: Path, rows: Sequence[VariantComparison], header: dict, unit: str = 'hours') -> Dict[str, Path]:
    table = [r.to_row(unit) for r in rows]
    return {
        'json': write_json(out / 'comparison.json',
                           {'unit': unit, 'rows': [dict(zip(COMPARISON_COLUMNS, r)) for r in table]}, header),
        'csv': write_csv(out / 'comparison.csv', COMPARISON_COLUMNS, table, header),
    }
