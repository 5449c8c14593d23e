"""Helpers shared by the command modules."""

import logging
from argparse import Namespace
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config import config
from utils.artifacts import provenance, read_json, resolve_output_dir, write_json
from utils.demand_net import FORMAT_NAME as MODEL_FORMAT, TrainedModel, save_model
from utils.errors import ConfigError, ContractError, DataError
from utils.pipeline_config import PipelineConfig, load_pipeline_config, with_overrides
from utils.regression import CoefficientSet

logger = logging.getLogger(__name__)

Fitted = Union[CoefficientSet, TrainedModel]


def add_override_flags(parser) -> None:
    parser.add_argument('--delta', type=float, help='CUSUM slack (overrides cusum.delta)')
    parser.add_argument('--epsilon', type=float, help='CUSUM threshold (overrides cusum.epsilon)')
    parser.add_argument('--seed', type=int, help='base seed (overrides seed)')
    parser.add_argument('--variant', choices=['PINN', 'BASE', 'FK'], help='overrides variant')
    parser.add_argument('--out', help='output directory (overrides output)')


def load_config(args: Namespace) -> PipelineConfig:
    path = args.config or config.CONFIG_PATH
    if not path:
        raise ConfigError('no pipeline config given; pass --config FILE')
    pipeline = load_pipeline_config(path)
    return with_overrides(
        pipeline,
        delta=getattr(args, 'delta', None),
        epsilon=getattr(args, 'epsilon', None),
        seed=getattr(args, 'seed', None),
        jobs=getattr(args, 'jobs', None),
        out=getattr(args, 'out', None),
        variant=getattr(args, 'variant', None),
    )


def output_dir(args: Namespace, pipeline: PipelineConfig = None) -> Path:
    out = getattr(args, 'out', None) or (pipeline.output if pipeline else None)
    return resolve_output_dir(out)


def header(args: Namespace, payload: Any, seed: int) -> Dict[str, Any]:
    return provenance(payload, seed, no_timestamp=getattr(args, 'no_timestamp', False))


@dataclass(frozen=True)
class StoredModel:
    variant: str
    fitted: Fitted
    seed: Optional[int]
    path: Path


def save_fitted(fitted: Fitted, path: Path, variant: str, meta: dict) -> Path:
    """model.json for a demand network, a coefficients document otherwise."""
    if isinstance(fitted, TrainedModel):
        return save_model(fitted, path, meta)
    return write_json(path, {'variant': variant, 'coefficients': fitted.to_dict()}, meta)


def load_fitted(path: Union[str, Path]) -> StoredModel:
    path = Path(path)
    document = read_json(path)
    seed = document.pop('provenance', {}).get('seed')
    if document.get('format') == MODEL_FORMAT:
        return StoredModel('PINN', TrainedModel.from_dict(document), seed, path)
    if 'coefficients' in document:
        return StoredModel(document.get('variant', 'BASE'),
                           CoefficientSet.from_dict(document['coefficients']), seed, path)
    raise ContractError(f'{path} holds neither a demand network nor coefficients')


def load_stored_models(directory: Union[str, Path]) -> List[StoredModel]:
    """
    Every model document in a directory, ordered by seed.

    Raises:
        DataError: the directory holds no JSON documents.
    """
    paths = sorted(Path(directory).glob('*.json'))
    if not paths:
        raise DataError(f'no stored models in {directory}')
    models = [load_fitted(p) for p in paths]
    return sorted(models, key=lambda m: (m.seed is None, m.seed or 0, m.path.name))
