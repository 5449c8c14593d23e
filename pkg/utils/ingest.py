"""
Pressure panel ingestion.

Loads sensor pressures (meters head) and optional known-demand flows (m³/h)
from delimited text files into an immutable PressurePanel on a uniform UTC
time grid. The canonical grid step is 300 s (five-minute SCADA sampling).

    timestamp;n1;n4;n31          <- header row: sensor ids
    2019-01-01 00:00:00;48.1;..  <- first column ISO-8601, rest floats

Column roles (pressure | known_demand | ignore), delimiter, decimal mark,
input timezone and gap policy come from a CsvSchema; nothing is inferred.
"""

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dateutil import tz
from dateutil.parser import isoparse

from utils.errors import (
    AlignmentError, ConfigError, ContractError, DataError, GapError,
    NonFiniteError, ParseError, RangeError,
)

logger = logging.getLogger(__name__)

CANONICAL_STEP_SECONDS = 300
ROLES = ('pressure', 'known_demand', 'ignore')
GAP_POLICIES = ('strict', 'ffill')

Timestamp = Union[datetime, str, pd.Timestamp]


def to_utc(value: Timestamp, default_tz: str = 'UTC') -> datetime:
    """Parse an ISO-8601 string (or datetime) and return an aware UTC datetime."""
    if isinstance(value, pd.Timestamp):
        value = value.to_pydatetime()
    if isinstance(value, str):
        try:
            value = isoparse(value.strip())
        except ValueError as e:
            raise ParseError(f'invalid timestamp {value!r}: {e}')
    if value.tzinfo is None:
        zone = tz.gettz(default_tz)
        if zone is None:
            raise ConfigError(f'unknown timezone {default_tz!r}')
        value = value.replace(tzinfo=zone)
    return value.astimezone(tz.UTC)


@dataclass(frozen=True)
class TimeAxis:
    start: datetime
    step: int
    length: int

    def __post_init__(self):
        if self.step <= 0:
            raise ConfigError(f'time step must be positive, got {self.step}')
        if self.length < 1:
            raise ConfigError(f'time axis needs at least one sample, got {self.length}')
        object.__setattr__(self, 'start', to_utc(self.start))

    @property
    def end(self) -> datetime:
        """Exclusive end of the axis."""
        return self.start + timedelta(seconds=self.step * self.length)

    def timestamp(self, i: int) -> datetime:
        return self.start + timedelta(seconds=self.step * i)

    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.length, freq=f'{self.step}s')

    def index_of(self, ts: Timestamp, allow_end: bool = False) -> int:
        """
        Grid index of a timestamp.

        Raises:
            AlignmentError: ts does not fall on the grid.
            RangeError: ts is outside the axis ([start, end] when allow_end).
        """
        offset = (to_utc(ts) - self.start).total_seconds()
        index, rest = divmod(offset, self.step)
        if rest != 0:
            raise AlignmentError(f'{to_utc(ts).isoformat()} is off the {self.step}s grid')
        index = int(index)
        upper = self.length if allow_end else self.length - 1
        if index < 0 or index > upper:
            raise RangeError(
                f'{to_utc(ts).isoformat()} outside [{self.start.isoformat()}, {self.end.isoformat()})'
            )
        return index

    def sub_axis(self, i0: int, i1: int) -> 'TimeAxis':
        return TimeAxis(start=self.timestamp(i0), step=self.step, length=i1 - i0)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class PressurePanel:
    """
    Aligned sensor pressures (N×T) plus known irregular demand flows (D×T).

    Immutable after construction; arrays are read-only.
    """
    axis: TimeAxis
    sensor_ids: Tuple[str, ...]
    values: np.ndarray
    demand_ids: Tuple[str, ...] = ()
    demands: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    pressure_unit: str = 'm'
    flow_unit: str = 'm3/h'

    def __post_init__(self):
        values = _frozen(self.values)
        sensor_ids = tuple(self.sensor_ids)
        demand_ids = tuple(self.demand_ids)
        demands = np.asarray(self.demands, dtype=np.float64)
        if demands.size == 0 and not demand_ids:
            demands = np.zeros((len(demand_ids), self.axis.length))
        demands = _frozen(demands)

        if len(sensor_ids) < 2:
            raise ContractError('a pressure panel needs at least two sensors')
        if len(set(sensor_ids)) != len(sensor_ids):
            raise ContractError(f'duplicated sensor ids: {sensor_ids}')
        if values.shape != (len(sensor_ids), self.axis.length):
            raise ContractError(
                f'values shape {values.shape} does not match '
                f'{len(sensor_ids)} sensors x {self.axis.length} samples'
            )
        if demands.shape != (len(demand_ids), self.axis.length):
            raise ContractError(
                f'demands shape {demands.shape} does not match '
                f'{len(demand_ids)} channels x {self.axis.length} samples'
            )
        if not np.isfinite(values).all() or not np.isfinite(demands).all():
            raise GapError('panel contains missing or non-finite values')

        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'sensor_ids', sensor_ids)
        object.__setattr__(self, 'demand_ids', demand_ids)
        object.__setattr__(self, 'demands', demands)

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_ids)

    @property
    def length(self) -> int:
        return self.axis.length

    @property
    def known_demands(self) -> List[Tuple[str, np.ndarray]]:
        return [(d, self.demands[k]) for k, d in enumerate(self.demand_ids)]

    def sensor_index(self, sensor_id: str) -> int:
        try:
            return self.sensor_ids.index(sensor_id)
        except ValueError:
            raise ContractError(f'unknown sensor id {sensor_id!r}')

    def demand_matrix(self, ids: Sequence[str]) -> np.ndarray:
        """Rows of the known-demand matrix for the given channel ids, in that order."""
        missing = [d for d in ids if d not in self.demand_ids]
        if missing:
            raise ContractError(f'panel has no demand channel(s) {missing}')
        if not ids:
            return np.zeros((0, self.length))
        return self.demands[[self.demand_ids.index(d) for d in ids]]

    def with_demands(self, ids: Sequence[str], demands: np.ndarray) -> 'PressurePanel':
        return PressurePanel(
            axis=self.axis, sensor_ids=self.sensor_ids, values=self.values,
            demand_ids=tuple(ids), demands=demands,
            pressure_unit=self.pressure_unit, flow_unit=self.flow_unit,
        )


@dataclass(frozen=True)
class CsvSchema:
    """Column-mapping config for load_pressure_panel."""
    timestamp_column: str
    columns: Dict[str, str]
    delimiter: str = ','
    decimal: str = '.'
    timezone: str = 'UTC'
    gap_policy: str = 'strict'
    step_seconds: Optional[int] = None
    pressure_unit: str = 'm'
    flow_unit: str = 'm3/h'

    def __post_init__(self):
        bad_roles = {c: r for c, r in self.columns.items() if r not in ROLES}
        if bad_roles:
            raise ConfigError(f'unknown column roles {bad_roles}; expected one of {ROLES}')
        if len(self.pressure_columns) < 2:
            raise ConfigError('schema must name at least two pressure columns')
        if self.gap_policy not in GAP_POLICIES:
            raise ConfigError(f'gap policy must be one of {GAP_POLICIES}, got {self.gap_policy!r}')
        if tz.gettz(self.timezone) is None:
            raise ConfigError(f'unknown timezone {self.timezone!r}')

    @property
    def pressure_columns(self) -> List[str]:
        return [c for c, r in self.columns.items() if r == 'pressure']

    @property
    def demand_columns(self) -> List[str]:
        return [c for c, r in self.columns.items() if r == 'known_demand']

    @classmethod
    def from_dict(cls, data: dict) -> 'CsvSchema':
        if 'columns' not in data:
            raise ConfigError('schema needs a "columns" mapping')
        columns = data['columns']
        if isinstance(columns, list):
            columns = {name: 'pressure' for name in columns}
        return cls(
            timestamp_column=data.get('timestamp_column', 'timestamp'),
            columns={str(k): str(v) for k, v in columns.items()},
            delimiter=data.get('delimiter', ','),
            decimal=data.get('decimal', '.'),
            timezone=data.get('timezone', 'UTC'),
            gap_policy=data.get('gap_policy', 'strict'),
            step_seconds=data.get('step_seconds'),
            pressure_unit=data.get('pressure_unit', 'm'),
            flow_unit=data.get('flow_unit', 'm3/h'),
        )

    @classmethod
    def for_panel(cls, panel: PressurePanel, delimiter: str = ',') -> 'CsvSchema':
        """Schema matching the layout write_panel produces."""
        columns = {s: 'pressure' for s in panel.sensor_ids}
        columns.update({d: 'known_demand' for d in panel.demand_ids})
        return cls(
            timestamp_column='timestamp', columns=columns, delimiter=delimiter,
            step_seconds=panel.axis.step,
            pressure_unit=panel.pressure_unit, flow_unit=panel.flow_unit,
        )


def _data_lines(path: Path, rows: int) -> np.ndarray:
    """1-based file line of each data row; blank and comment lines are not rows."""
    with path.open(encoding='utf-8', errors='replace') as handle:
        numbers = [k for k, line in enumerate(handle, start=1)
                   if line.strip() and not line.lstrip().startswith('#')]
    # quoted cells spanning lines break the one-row-per-line count
    if len(numbers) != rows + 1:
        return np.arange(rows) + 2
    return np.array(numbers[1:])


def _parse_error_line(error: Exception) -> Optional[int]:
    match = re.search(r'line (\d+)', str(error))
    return int(match.group(1)) if match else None


MISSING_MARKERS = ('', 'nan', 'na', 'null')


def _to_float(cells: pd.Series, column: str, lines: np.ndarray) -> np.ndarray:
    """Convert a column of strings; empty cells become NaN, anything else unparsable is an error."""
    stripped = cells.str.strip()
    missing = stripped.str.lower().isin(MISSING_MARKERS).to_numpy()
    text = np.where(missing, 'nan', stripped.to_numpy(dtype=object))
    try:
        numbers = np.asarray(text, dtype=np.float64)
    except ValueError:
        numbers = None

    if numbers is None:
        for row, cell in enumerate(text):
            try:
                float(cell)
            except ValueError:
                raise ParseError(f'column {column!r}: cannot parse {cells.iloc[row]!r} as a number', line=int(lines[row]))
    infinite = np.isinf(numbers) | (np.isnan(numbers) & ~missing)
    if infinite.any():
        row = int(np.flatnonzero(infinite)[0])
        raise ParseError(f'column {column!r}: non-finite value {cells.iloc[row]!r}', line=int(lines[row]))
    return numbers


def _fill_gaps(matrix: np.ndarray, names: Sequence[str], policy: str, lines: np.ndarray) -> np.ndarray:
    missing = np.isnan(matrix)
    if not missing.any():
        return matrix
    column, row = np.argwhere(missing)[0]
    if policy == 'strict':
        raise GapError(f'missing value in column {names[column]!r} at line {lines[row]}')

    if missing[:, 0].any():
        first = names[int(np.flatnonzero(missing[:, 0])[0])]
        raise GapError(f'column {first!r} starts with a missing value; nothing to forward-fill from')
    filled = pd.DataFrame(matrix.T).ffill(axis=0).to_numpy().T
    logger.info('forward-filled %d missing cell(s) across %d column(s)',
                int(missing.sum()), int(missing.any(axis=1).sum()))
    return filled


def load_pressure_panel(path: Union[str, Path], schema: CsvSchema) -> PressurePanel:
    """
    Load a panel from a delimited file.

    Args:
        path: CSV file with a header row.
        schema: Column roles, delimiter, decimal mark, input timezone and gap policy.

    Returns:
        PressurePanel with strictly increasing, uniform UTC timestamps and
        sensors in schema order.

    Raises:
        ParseError: malformed row (with line number).
        AlignmentError: duplicated or non-uniform timestamps.
        GapError: missing cell under the strict policy.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f'no such file: {path}')

    try:
        frame = pd.read_csv(
            path, sep=schema.delimiter, dtype=str, keep_default_na=False,
            comment='#', skipinitialspace=True,
        )
    except pd.errors.ParserError as e:
        raise ParseError(str(e).strip(), line=_parse_error_line(e))
    except pd.errors.EmptyDataError:
        raise ParseError('file is empty', line=1)

    frame.columns = [c.strip() for c in frame.columns]
    wanted = [schema.timestamp_column] + list(schema.columns)
    absent = [c for c in wanted if c not in frame.columns]
    if absent:
        raise ParseError(f'header lacks column(s) {absent}', line=1)
    if frame.empty:
        raise ParseError('file has a header but no rows', line=2)

    lines = _data_lines(path, len(frame))
    stamps = []
    for row, raw in enumerate(frame[schema.timestamp_column]):
        try:
            stamps.append(to_utc(raw, schema.timezone))
        except ParseError as e:
            raise ParseError(str(e), line=int(lines[row]))

    step = _uniform_step(stamps, schema.step_seconds, lines)

    def numeric(columns: List[str]) -> np.ndarray:
        if not columns:
            return np.zeros((0, len(frame)))
        if schema.decimal != '.':
            cells = {c: frame[c].str.replace(schema.decimal, '.', regex=False) for c in columns}
        else:
            cells = {c: frame[c] for c in columns}
        matrix = np.vstack([_to_float(cells[c], c, lines) for c in columns])
        return _fill_gaps(matrix, columns, schema.gap_policy, lines)

    pressures = numeric(schema.pressure_columns)
    demands = numeric(schema.demand_columns)

    panel = PressurePanel(
        axis=TimeAxis(start=stamps[0], step=step, length=len(stamps)),
        sensor_ids=tuple(schema.pressure_columns),
        values=pressures,
        demand_ids=tuple(schema.demand_columns),
        demands=demands,
        pressure_unit=schema.pressure_unit,
        flow_unit=schema.flow_unit,
    )
    logger.info('loaded %s: %d sensors, %d demand channel(s), %d samples at %ds',
                path.name, panel.n_sensors, len(panel.demand_ids), panel.length, step)
    return panel


def _uniform_step(stamps: List[datetime], declared: Optional[int], lines: np.ndarray) -> int:
    if len(stamps) == 1:
        return declared or CANONICAL_STEP_SECONDS

    seconds = np.array([(s - stamps[0]).total_seconds() for s in stamps])
    deltas = np.diff(seconds)
    if (deltas == 0).any():
        row = int(np.flatnonzero(deltas == 0)[0]) + 1
        raise AlignmentError(f'duplicated timestamp {stamps[row].isoformat()} at line {lines[row]}')
    if (deltas < 0).any():
        row = int(np.flatnonzero(deltas < 0)[0]) + 1
        raise AlignmentError(f'timestamps go backwards at line {lines[row]}')

    step = deltas[0]
    off = np.flatnonzero(deltas != step)
    if off.size:
        row = int(off[0]) + 1
        raise AlignmentError(
            f'non-uniform sampling at line {lines[row]}: '
            f'{deltas[off[0]]:.0f}s after a {step:.0f}s step'
        )
    if step != int(step):
        raise AlignmentError(f'sampling step {step}s is not a whole number of seconds')
    if declared is not None and int(step) != declared:
        raise AlignmentError(f'file step {int(step)}s does not match the declared {declared}s')
    return int(step)


def write_panel(panel: PressurePanel, path: Union[str, Path], delimiter: str = ',') -> Path:
    """
    Write a panel in the layout load_pressure_panel reads (see CsvSchema.for_panel).

    Floats use 17 significant digits so re-reading reproduces fp64 values exactly.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        np.vstack([panel.values, panel.demands]).T,
        columns=list(panel.sensor_ids) + list(panel.demand_ids),
    )
    frame.insert(0, 'timestamp', [t.isoformat() for t in panel.axis.timestamps()])
    frame.to_csv(path, sep=delimiter, index=False, float_format='%.17g')
    return path


def slice_window(panel: PressurePanel, start: Timestamp, end: Timestamp) -> PressurePanel:
    """
    Contiguous sub-panel covering [start, end).

    Raises:
        RangeError: end not after start, or bounds outside the panel.
        AlignmentError: a bound is off the sampling grid.
    """
    start, end = to_utc(start), to_utc(end)
    if end <= start:
        raise RangeError(f'window end {end.isoformat()} is not after start {start.isoformat()}')
    i0 = panel.axis.index_of(start)
    i1 = panel.axis.index_of(end, allow_end=True)
    if i1 <= i0:
        raise RangeError('window is empty')

    return PressurePanel(
        axis=panel.axis.sub_axis(i0, i1),
        sensor_ids=panel.sensor_ids,
        values=panel.values[:, i0:i1],
        demand_ids=panel.demand_ids,
        demands=panel.demands[:, i0:i1],
        pressure_unit=panel.pressure_unit,
        flow_unit=panel.flow_unit,
    )


@dataclass(frozen=True)
class ScaleRecord:
    per_channel_max_abs: np.ndarray

    def scale(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) / self.per_channel_max_abs

    def unscale(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.per_channel_max_abs

    def to_dict(self) -> dict:
        return {'per_channel_max_abs': self.per_channel_max_abs.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> 'ScaleRecord':
        return cls(np.asarray(data['per_channel_max_abs'], dtype=np.float64))


def max_abs_scale_columns(matrix: np.ndarray) -> Tuple[np.ndarray, ScaleRecord]:
    """Column-wise max-abs scaling of a T×C matrix; all-zero columns keep scale 1."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.isfinite(matrix).all():
        raise NonFiniteError('cannot scale non-finite values')
    peak = np.abs(matrix).max(axis=0) if matrix.size else np.ones(matrix.shape[-1])
    peak = np.where(peak > 0, peak, 1.0)
    record = ScaleRecord(peak)
    return record.scale(matrix), record


def max_abs_scale(series: np.ndarray) -> Tuple[np.ndarray, ScaleRecord]:
    """
    Scale a series into [-1, 1] by its largest magnitude.

    An all-zero series stays all-zero and records the sentinel scale 1.
    """
    series = np.asarray(series, dtype=np.float64)
    scaled, record = max_abs_scale_columns(series.reshape(-1, 1))
    return scaled.ravel(), record

