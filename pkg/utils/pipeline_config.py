"""
Pipeline configuration.

One YAML file drives every command; config.example.yaml documents every key
and its default. Command-line flags override file values through
with_overrides().
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from config import config
from utils.demand_net import NetworkParams
from utils.errors import ConfigError, ContractError, ValidationError
from utils.evaluation import RunSettings, ScenarioData, VARIANTS
from utils.ingest import CsvSchema, load_pressure_panel, to_utc
from utils.regression import MRE_MODES
from utils.synth import (
    ScenarioSpec, generate, generate_detectable, load_scenario_spec, reference_scenario,
)

logger = logging.getLogger(__name__)

TTD_UNITS = ('hours', 'days')
DEFAULT_DELTAS = tuple(0.25 * k for k in range(9))
DEFAULT_EPSILONS = tuple(200.0 + 25.0 * k for k in range(9))


@dataclass(frozen=True)
class DataConfig:
    """
    Where the panel comes from: a scenario spec file, the canned reference
    scenario, or a CSV panel with its column schema.
    """
    scenario: Optional[str] = None
    reference: Optional[Dict[str, Any]] = None
    panel: Optional[str] = None
    schema: Optional[CsvSchema] = None
    truth: Optional[str] = None
    truth_columns: Tuple[str, ...] = ()
    leak_start: Optional[datetime] = None

    def __post_init__(self):
        sources = [s for s in (self.scenario, self.reference, self.panel) if s is not None]
        if len(sources) != 1:
            raise ConfigError('data needs exactly one of scenario, reference or panel')
        if self.panel is not None and self.schema is None:
            raise ConfigError('a CSV panel needs a schema')


@dataclass(frozen=True)
class WindowConfig:
    training_start: Optional[datetime] = None
    training_end: Optional[datetime] = None
    evaluation_end: Optional[datetime] = None

    def __post_init__(self):
        if (self.training_start is None) != (self.training_end is None):
            raise ConfigError('training window needs both start and end')
        if self.training_start is not None and not self.training_start < self.training_end:
            raise ValidationError('training window start must precede its end')
        if self.evaluation_end is not None and self.training_end is not None \
                and not self.training_end < self.evaluation_end:
            raise ValidationError('training window must precede the evaluation window')


@dataclass(frozen=True)
class CusumSection:
    delta: float = 1.0
    epsilon: float = 300.0
    mode: str = 'per-pair'

    def __post_init__(self):
        if not self.delta >= 0:
            raise ConfigError(f'cusum.delta must be >= 0, got {self.delta}')
        if not self.epsilon > 0:
            raise ConfigError(f'cusum.epsilon must be > 0, got {self.epsilon}')
        if self.mode not in MRE_MODES:
            raise ConfigError(f'cusum.mode must be one of {MRE_MODES}')


@dataclass(frozen=True)
class SweepSection:
    deltas: Tuple[float, ...] = DEFAULT_DELTAS
    epsilons: Tuple[float, ...] = DEFAULT_EPSILONS

    def __post_init__(self):
        if not self.deltas or not self.epsilons:
            raise ConfigError('sweep grids must not be empty')


@dataclass(frozen=True)
class UqSection:
    runs: int = 100
    seeds: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError('uq.runs must be >= 1')
        if self.seeds and len(set(self.seeds)) != len(self.seeds):
            raise ConfigError('uq.seeds must be distinct')


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig
    windows: WindowConfig = field(default_factory=WindowConfig)
    variant: str = 'PINN'
    network: NetworkParams = field(default_factory=NetworkParams)
    cusum: CusumSection = field(default_factory=CusumSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    uq: UqSection = field(default_factory=UqSection)
    seed: int = 0
    output: Optional[str] = None
    jobs: int = 1
    ttd_unit: str = 'hours'

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f'variant must be one of {VARIANTS}, got {self.variant!r}')
        if self.jobs == 0:
            raise ConfigError('jobs must be non-zero')
        if self.ttd_unit not in TTD_UNITS:
            raise ConfigError(f'ttd_unit must be one of {TTD_UNITS}')

    @property
    def uq_seeds(self) -> List[int]:
        if self.uq.seeds:
            return list(self.uq.seeds)
        return list(range(self.seed, self.seed + self.uq.runs))

    def run_settings(self) -> RunSettings:
        return RunSettings(network=self.network, delta=self.cusum.delta,
                           epsilon=self.cusum.epsilon, mode=self.cusum.mode)

    def to_dict(self) -> dict:
        return asdict(self)


def _timestamp(value) -> Optional[datetime]:
    return None if value is None else to_utc(str(value) if not isinstance(value, datetime) else value)


def _section(data: dict, key: str) -> dict:
    value = data.get(key) or {}
    if not isinstance(value, dict):
        raise ConfigError(f'{key} must be a mapping')
    return value


def _build(cls, values: dict, name: str):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f'invalid {name} section: {e}')


def from_dict(data: dict) -> PipelineConfig:
    """Build a PipelineConfig from the parsed YAML tree."""
    if not isinstance(data, dict):
        raise ConfigError('config must be a mapping')
    unknown = set(data) - {'data', 'windows', 'variant', 'network', 'cusum', 'sweep',
                           'uq', 'seed', 'output', 'jobs', 'ttd_unit'}
    if unknown:
        raise ConfigError(f'unknown config keys: {sorted(unknown)}')

    source = dict(_section(data, 'data'))
    if 'schema' in source and source['schema'] is not None:
        source['schema'] = CsvSchema.from_dict(source['schema'])
    source['truth_columns'] = tuple(source.get('truth_columns') or ())
    source['leak_start'] = _timestamp(source.get('leak_start'))

    windows = {k: _timestamp(v) for k, v in _section(data, 'windows').items()}
    sweep = _section(data, 'sweep')
    uq = _section(data, 'uq')

    try:
        return PipelineConfig(
            data=_build(DataConfig, source, 'data'),
            windows=_build(WindowConfig, windows, 'windows'),
            variant=str(data.get('variant', 'PINN')),
            network=_build(NetworkParams, _section(data, 'network'), 'network'),
            cusum=_build(CusumSection, _section(data, 'cusum'), 'cusum'),
            sweep=SweepSection(
                deltas=tuple(float(v) for v in sweep.get('deltas', DEFAULT_DELTAS)),
                epsilons=tuple(float(v) for v in sweep.get('epsilons', DEFAULT_EPSILONS)),
            ),
            uq=UqSection(runs=int(uq.get('runs', 100)), seeds=tuple(int(s) for s in uq.get('seeds', ()))),
            seed=int(data.get('seed', 0)),
            output=data.get('output'),
            jobs=int(data.get('jobs', config.JOBS)),
            ttd_unit=str(data.get('ttd_unit', 'hours')),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f'invalid config value: {e}')


def load_pipeline_config(path: Union[str, Path]) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'config file not found: {path}')
    try:
        data = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as e:
        raise ConfigError(f'{path}: invalid YAML: {e}')
    pipeline = from_dict(data)
    logger.debug('loaded pipeline config from %s', path)
    return _resolve_paths(pipeline, path.parent)


def _resolve_paths(pipeline: PipelineConfig, base: Path) -> PipelineConfig:
    """Relative data paths are relative to the config file."""
    def resolve(value: Optional[str]) -> Optional[str]:
        if value is None or Path(value).is_absolute():
            return value
        return str(base / value)

    data = replace(pipeline.data, scenario=resolve(pipeline.data.scenario),
                   panel=resolve(pipeline.data.panel), truth=resolve(pipeline.data.truth))
    return replace(pipeline, data=data)


def with_overrides(pipeline: PipelineConfig, **overrides) -> PipelineConfig:
    """
    Apply command-line overrides (delta, epsilon, seed, jobs, out, variant);
    None values leave the file value in place.
    """
    cusum = pipeline.cusum
    if overrides.get('delta') is not None:
        cusum = replace(cusum, delta=float(overrides['delta']))
    if overrides.get('epsilon') is not None:
        cusum = replace(cusum, epsilon=float(overrides['epsilon']))
    changes = {'cusum': cusum}
    for key, target in (('seed', 'seed'), ('jobs', 'jobs'), ('out', 'output'), ('variant', 'variant')):
        if overrides.get(key) is not None:
            changes[target] = overrides[key]
    return replace(pipeline, **changes)


def scenario_spec(pipeline: PipelineConfig) -> Optional[ScenarioSpec]:
    source = pipeline.data
    if source.scenario is not None:
        return load_scenario_spec(source.scenario)
    if source.reference is not None:
        options = dict(source.reference)
        options.setdefault('seed', pipeline.seed)
        try:
            return reference_scenario(**options)
        except TypeError as e:
            raise ConfigError(f'invalid reference scenario options: {e}')
    return None


def load_scenario_data(pipeline: PipelineConfig) -> ScenarioData:
    """
    Build the ScenarioData a command runs on.

    Scenario sources are regenerated from their spec (deterministic per seed);
    a leak the fully informed model cannot see moves on to the next seed, as
    synth does. CSV sources need explicit training windows.

    Raises:
        ValidationError: no detectable leak within the re-seeding budget.
    """
    spec = scenario_spec(pipeline)
    windows = pipeline.windows
    if spec is not None:
        if spec.leaks:
            truth, spec = generate_detectable(spec)
        else:
            truth = generate(spec)
        data = ScenarioData.from_truth(truth, spec)
        if windows.training_start is None and windows.evaluation_end is None:
            return data
        return replace_windows(data, windows)

    source = pipeline.data
    panel = load_pressure_panel(source.panel, source.schema)
    if windows.training_start is None:
        raise ConfigError('a CSV panel needs windows.training_start and windows.training_end')

    truth_demands = None
    if source.truth is not None:
        frame = pd.read_csv(source.truth, float_precision='round_trip', comment='#')
        missing = [c for c in source.truth_columns if c not in frame.columns]
        if missing:
            raise ContractError(f'truth file lacks columns {missing}')
        if len(frame) != panel.length:
            raise ContractError(f'truth file has {len(frame)} rows for a {panel.length}-sample panel')
        truth_demands = frame[list(source.truth_columns)].to_numpy(dtype=np.float64).T

    return ScenarioData(
        panel=panel,
        training_start=windows.training_start,
        training_end=windows.training_end,
        evaluation_end=windows.evaluation_end,
        leak_start=source.leak_start,
        truth_ids=source.truth_columns if truth_demands is not None else (),
        truth_demands=truth_demands,
    )


def replace_windows(data: ScenarioData, windows: WindowConfig) -> ScenarioData:
    return replace(
        data,
        training_start=windows.training_start or data.training_start,
        training_end=windows.training_end or data.training_end,
        evaluation_end=windows.evaluation_end or data.evaluation_end,
    )
