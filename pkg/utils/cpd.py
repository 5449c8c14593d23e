"""
Two-sided CUSUM change-point detection on standardized MRE series.

With z_t = (x_t - mean) / std, frozen from a leak-free training window,

    s+_t = max(0, s+_{t-1} + z_t - delta)
    s-_t = max(0, s-_{t-1} - z_t - delta)        s_{-1} = 0

An alarm is the first t with max(s+_t, s-_t) > epsilon. Statistics keep
accumulating after the alarm; later crossings are logged, not reported.
delta and epsilon are therefore in units of training-window standard deviations.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import ConfigError, ContractError, FalsePositiveAlarm
from utils.ingest import TimeAxis
from utils.regression import MreSeries

logger = logging.getLogger(__name__)

# meters head
MIN_STD = 1e-9


@dataclass(frozen=True)
class CusumConfig:
    delta: float
    epsilon: float
    mean: float = 0.0
    std: float = 1.0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ConfigError(f'slack delta must be >= 0, got {self.delta}')
        if not self.epsilon > 0:
            raise ConfigError(f'threshold epsilon must be > 0, got {self.epsilon}')
        if not (np.isfinite(self.std) and self.std > 0):
            raise ConfigError(f'standardization std must be positive, got {self.std}')
        if not np.isfinite(self.mean):
            raise ConfigError(f'standardization mean must be finite, got {self.mean}')

    def standardize(self, series: np.ndarray) -> np.ndarray:
        return (np.asarray(series, dtype=np.float64) - self.mean) / self.std


@dataclass(frozen=True)
class CusumTrace:
    s_plus: np.ndarray
    s_minus: np.ndarray
    epsilon: float
    axis: Optional[TimeAxis] = None
    first_alarm_index: Optional[int] = None
    crossings: Tuple[int, ...] = ()

    @property
    def statistic(self) -> np.ndarray:
        return np.maximum(self.s_plus, self.s_minus)

    @property
    def first_alarm(self) -> Optional[datetime]:
        if self.first_alarm_index is None or self.axis is None:
            return None
        return self.axis.timestamp(self.first_alarm_index)


def cusum_statistics(z: np.ndarray, delta) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run the two-sided recurrence along the last axis.

    Leading axes are independent series; delta may be a scalar or an array
    broadcastable against z[..., 0] (e.g. one slack per row for grid sweeps).
    """
    z = np.asarray(z, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    head = np.broadcast_shapes(z.shape[:-1], delta.shape)
    s_plus = np.empty(head + z.shape[-1:])
    s_minus = np.empty_like(s_plus)
    up = np.zeros(head)
    down = np.zeros(head)
    for t in range(z.shape[-1]):
        up = np.maximum(0.0, up + z[..., t] - delta)
        down = np.maximum(0.0, down - z[..., t] - delta)
        s_plus[..., t] = up
        s_minus[..., t] = down
    return s_plus, s_minus


def _crossings(statistic: np.ndarray, epsilon: float) -> Tuple[int, ...]:
    above = statistic > epsilon
    rising = above & ~np.concatenate([[False], above[:-1]])
    return tuple(int(i) for i in np.flatnonzero(rising))


def cusum_run(series: np.ndarray, config: CusumConfig, axis: Optional[TimeAxis] = None) -> CusumTrace:
    """
    Two-sided CUSUM over one series.

    Args:
        series: Raw (unstandardized) T-vector.
        config: Slack, threshold and the frozen standardization.
        axis: Time axis of the series, used to timestamp the alarm.

    Returns:
        Full-length CusumTrace with the first alarm (strict crossing of epsilon).
    """
    series = np.asarray(series, dtype=np.float64)
    if not np.isfinite(series).all():
        raise ContractError('CUSUM input contains non-finite values')
    s_plus, s_minus = cusum_statistics(config.standardize(series), config.delta)
    crossings = _crossings(np.maximum(s_plus, s_minus), config.epsilon)
    return CusumTrace(
        s_plus=s_plus, s_minus=s_minus, epsilon=config.epsilon, axis=axis,
        first_alarm_index=crossings[0] if crossings else None,
        crossings=crossings,
    )


def fit_standardization(series: np.ndarray, series_ids: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-series mean and standard deviation of a leak-free window (S×T).

    Standard deviations below MIN_STD are raised to it, so rounding-level
    residuals of an exact model are not blown up into alarms.

    Raises:
        ConfigError: a series is exactly constant.
    """
    series = np.atleast_2d(np.asarray(series, dtype=np.float64))
    means = series.mean(axis=1)
    stds = series.std(axis=1)
    flat = np.flatnonzero(~(stds > 0))
    if flat.size:
        name = series_ids[flat[0]] if series_ids is not None else str(flat[0])
        raise ConfigError(f'series {name!r} has zero variance in the training window')
    floored = np.flatnonzero(stds < MIN_STD)
    if floored.size:
        logger.warning('%d series with std below %.0e; using the floor', floored.size, MIN_STD)
    return means, np.maximum(stds, MIN_STD)


def make_configs(delta: float, epsilon: float, means: np.ndarray, stds: np.ndarray) -> List[CusumConfig]:
    return [CusumConfig(delta=delta, epsilon=epsilon, mean=float(m), std=float(s))
            for m, s in zip(means, stds)]


@dataclass(frozen=True)
class Alarm:
    timestamp: datetime
    series_id: str
    statistic: float
    index: int


@dataclass(frozen=True)
class DetectionResult:
    mode: str
    alarms: List[Alarm]
    traces: Dict[str, CusumTrace]
    configs: List[CusumConfig]
    axis: TimeAxis
    standardized: np.ndarray = field(repr=False, default=None)

    @property
    def first_alarm(self) -> Optional[Alarm]:
        return self.alarms[0] if self.alarms else None

    @property
    def combined_statistic(self) -> np.ndarray:
        """Pointwise maximum of every monitored series' statistic."""
        return np.max(np.stack([t.statistic for t in self.traces.values()]), axis=0)


def detect(
    mre: MreSeries,
    configs: Sequence[CusumConfig],
    start: Optional[int] = None,
) -> DetectionResult:
    """
    Run CUSUM on every monitored series of an MRE and collect alarms.

    Args:
        mre: Reconstruction error with its reduced series (per-pair or mean).
        configs: One config per reduced series, standardization included.
        start: First index of the evaluation window; earlier samples are not monitored.

    Returns:
        DetectionResult whose alarms are sorted by time; the first one is the
        detection and names the crossing series.
    """
    if len(configs) != mre.reduced.shape[0]:
        raise ContractError(f'{len(configs)} configs for {mre.reduced.shape[0]} monitored series')
    start = 0 if start is None else int(start)
    if not 0 <= start < mre.axis.length:
        raise ContractError(f'evaluation start {start} outside the series')
    axis = mre.axis.sub_axis(start, mre.axis.length)

    series = mre.reduced[:, start:]
    z = np.stack([c.standardize(s) for c, s in zip(configs, series)])
    deltas = np.array([c.delta for c in configs])
    s_plus, s_minus = cusum_statistics(z, deltas)

    traces: Dict[str, CusumTrace] = {}
    alarms: List[Alarm] = []
    for k, (series_id, config) in enumerate(zip(mre.series_ids, configs)):
        crossings = _crossings(np.maximum(s_plus[k], s_minus[k]), config.epsilon)
        first = crossings[0] if crossings else None
        traces[series_id] = CusumTrace(
            s_plus=s_plus[k], s_minus=s_minus[k], epsilon=config.epsilon,
            axis=axis, first_alarm_index=first, crossings=crossings,
        )
        if first is not None:
            alarms.append(Alarm(
                timestamp=axis.timestamp(first), series_id=series_id,
                statistic=float(max(s_plus[k, first], s_minus[k, first])), index=first,
            ))
            for later in crossings[1:]:
                logger.debug('series %s crossed epsilon again at %s', series_id, axis.timestamp(later))

    alarms.sort(key=lambda a: a.index)
    if alarms:
        logger.info('first alarm at %s on series %s (%d series alarmed)',
                    alarms[0].timestamp.isoformat(), alarms[0].series_id, len(alarms))
    return DetectionResult(mode=mre.mode, alarms=alarms, traces=traces,
                           configs=list(configs), axis=axis, standardized=z)


def first_alarm_indices(statistic: np.ndarray, epsilons: Sequence[float]) -> np.ndarray:
    """
    Earliest index at which the statistic (any row, if 2-D) strictly exceeds
    each threshold; -1 where it never does.
    """
    statistic = np.asarray(statistic, dtype=np.float64)
    combined = statistic.max(axis=0) if statistic.ndim == 2 else statistic
    running = np.maximum.accumulate(combined)
    idx = np.searchsorted(running, np.asarray(epsilons, dtype=np.float64), side='right')
    return np.where(idx >= combined.size, -1, idx)


def time_to_detection(t_d: datetime, t_start: datetime) -> timedelta:
    """
    TTD = t_d - t_start.

    Raises:
        FalsePositiveAlarm: the alarm precedes the leak.
    """
    if t_d < t_start:
        raise FalsePositiveAlarm(f'alarm at {t_d.isoformat()} precedes leak start {t_start.isoformat()}')
    return t_d - t_start


def format_ttd(duration: timedelta, unit: str = 'hours') -> float:
    seconds = duration.total_seconds()
    if unit == 'hours':
        return seconds / 3600.0
    if unit == 'days':
        return seconds / 86400.0
    raise ValueError(f'unknown TTD unit {unit!r}')


def alarm_log_rows(result: DetectionResult) -> List[list]:
    """Rows (timestamp, series id, statistic, delta, epsilon) for the alarm log."""
    by_id = dict(zip(result.traces, result.configs))
    return [
        [a.timestamp.isoformat(), a.series_id, a.statistic, by_id[a.series_id].delta, by_id[a.series_id].epsilon]
        for a in result.alarms
    ]
