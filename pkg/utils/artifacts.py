"""
Artifact writing for leakwatch runs.

All JSON goes through one canonical form (sorted keys, compact separators)
so identical inputs and seeds produce byte-identical files. Every artifact
carries a provenance record: the digest of the canonical config, the seed,
and a generation timestamp that --no-timestamp suppresses.
"""

import csv
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

import numpy as np

from config import config

_output_root: Optional[Path] = None


def get_output_root() -> Path:
    global _output_root

    if _output_root is None:
        if not config.OUTPUT_ROOT:
            raise ValueError(
                'LEAKWATCH_OUTPUT_ROOT is empty. '
                'Set it in .env or pass --out on the command line'
            )
        _output_root = Path(config.OUTPUT_ROOT)

    return _output_root


def resolve_output_dir(path: Optional[str]) -> Path:
    """Use the given directory, or fall back to the configured output root."""
    out = Path(path) if path else get_output_root()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, datetime):
        return value.isoformat()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f'not JSON serializable: {type(value).__name__}')


def canonical_json(payload: Any) -> str:
    """Serialize to canonical JSON (sort_keys=True, no spaces)."""
    return json.dumps(payload, sort_keys=True, separators=(',', ':'), default=_json_default)


def digest(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode('utf-8')).hexdigest()


def provenance(config_payload: Any, seed: Optional[int], no_timestamp: bool = False) -> Dict[str, Any]:
    record: Dict[str, Any] = {
        'config_digest': digest(config_payload),
        'seed': seed,
    }
    if not (no_timestamp or config.NO_TIMESTAMP):
        record['generated_at'] = datetime.now(timezone.utc).isoformat()
    return record


def write_json(path: Path, payload: Any, header: Optional[Dict[str, Any]] = None) -> Path:
    document = dict(payload) if header is None else {'provenance': header, **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(document) + '\n', encoding='utf-8')
    return path


def read_json(path: Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding='utf-8'))


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    header: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a CSV table, preceded by '# key=value' provenance lines.

    Floats are written with repr() so that re-reading reproduces them exactly.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('w', newline='', encoding='utf-8') as fh:
        for key, value in sorted((header or {}).items()):
            fh.write(f'# {key}={value}\n')
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])
    return path


def _csv_cell(value: Any) -> Any:
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, datetime):
        return value.isoformat()
    return value
