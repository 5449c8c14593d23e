"""SVG figures for detection traces, TTD distributions, sweeps and training curves."""

import logging
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np

logger = logging.getLogger(__name__)

# stable ids and no date stamp, so identical inputs give identical files
plt.rcParams['svg.hashsalt'] = 'leakwatch'
SVG_METADATA = {'Date': None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format='svg', metadata=SVG_METADATA)
    plt.close(fig)
    logger.debug('wrote %s', path)
    return path


def plot_detection_trace(
    path: Path,
    timestamps: Sequence[datetime],
    mre: np.ndarray,
    statistic: np.ndarray,
    series_ids: Sequence[str],
    epsilon: Optional[float] = None,
    leak_start: Optional[datetime] = None,
    leak_flow: Optional[np.ndarray] = None,
) -> Path:
    """MRE per series with the CUSUM statistic on a second axis."""
    mre = np.atleast_2d(mre)
    statistic = np.atleast_2d(statistic)
    fig, ax = plt.subplots(figsize=(10, 4))
    stat_ax = ax.twinx()
    for k, sid in enumerate(series_ids):
        ax.plot(timestamps, mre[k], lw=0.6, alpha=0.7, label=f'MRE {sid}')
        stat_ax.plot(timestamps, statistic[k], lw=1.2, ls='--', label=f'CUSUM {sid}')
    if epsilon is not None:
        stat_ax.axhline(epsilon, color='k', lw=0.8, ls=':', label='threshold')
    if leak_start is not None:
        ax.axvline(leak_start, color='r', lw=1.0, label='leak start')
    if leak_flow is not None:
        flow_ax = ax.twinx()
        flow_ax.spines['right'].set_position(('outward', 50))
        flow_ax.fill_between(timestamps, 0, leak_flow, color='r', alpha=0.1)
        flow_ax.set_ylabel('leak flow [m³/h]')
    ax.set_ylabel('MRE [m]')
    stat_ax.set_ylabel('CUSUM statistic')
    handles = ax.get_legend_handles_labels()
    stat_handles = stat_ax.get_legend_handles_labels()
    ax.legend(handles[0] + stat_handles[0], handles[1] + stat_handles[1], fontsize=7, loc='upper left')
    return _save(fig, path)


def plot_ttd_distribution(path: Path, ttds: Sequence[float], unit: str = 'hours') -> Path:
    fig, ax = plt.subplots(figsize=(4, 5))
    if len(ttds):
        ax.boxplot([list(ttds)], vert=True, widths=0.5, showmeans=True)
        jitter = np.linspace(-0.08, 0.08, len(ttds))
        ax.scatter(1 + jitter, ttds, s=8, alpha=0.6)
    else:
        ax.text(0.5, 0.5, 'no true positives', ha='center', va='center', transform=ax.transAxes)
    ax.set_xticks([1])
    ax.set_xticklabels(['TTD'])
    ax.set_ylabel(f'time to detection [{unit}]')
    return _save(fig, path)


def _grid(rows: Sequence[list], column: int):
    deltas = sorted({r[0] for r in rows})
    epsilons = sorted({r[1] for r in rows})
    values = np.full((len(deltas), len(epsilons)), np.nan)
    for r in rows:
        if r[column] is not None:
            values[deltas.index(r[0]), epsilons.index(r[1])] = r[column]
    return deltas, epsilons, values


def plot_sweep(out: Path, rows: Sequence[list]) -> Dict[str, Path]:
    """
    Sensitivity lines (avg TTD and F1 against epsilon, one line per delta)
    and one heatmap per metric. Rows follow the sweep CSV columns.
    """
    deltas, epsilons, ttd = _grid(rows, 2)
    _, _, f1 = _grid(rows, 3)
    ttd_hours = ttd / 3600.0

    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    for k, delta in enumerate(deltas):
        left.plot(epsilons, ttd_hours[k], marker='.', label=f'δ={delta:g}')
        right.plot(epsilons, f1[k], marker='.', label=f'δ={delta:g}')
    left.set_xlabel('ε')
    left.set_ylabel('average TTD [hours]')
    right.set_xlabel('ε')
    right.set_ylabel('F1')
    right.legend(fontsize=7)
    paths = {'sensitivity': _save(fig, Path(out) / 'sensitivity.svg')}

    for name, values, label in (('heatmap_ttd', ttd_hours, 'average TTD [hours]'), ('heatmap_f1', f1, 'F1')):
        fig, ax = plt.subplots(figsize=(6, 5))
        image = ax.imshow(values, origin='lower', aspect='auto', cmap='viridis')
        ax.set_xticks(range(len(epsilons)))
        ax.set_xticklabels([f'{e:g}' for e in epsilons], rotation=45)
        ax.set_yticks(range(len(deltas)))
        ax.set_yticklabels([f'{d:g}' for d in deltas])
        ax.set_xlabel('ε')
        ax.set_ylabel('δ')
        fig.colorbar(image, ax=ax, label=label)
        paths[name] = _save(fig, Path(out) / f'{name}.svg')
    return paths


def plot_fold_losses(path: Path, train_losses: List[List[float]], validation_losses: List[List[float]],
                     selected: Optional[int] = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for fold, (tr, va) in enumerate(zip(train_losses, validation_losses)):
        width = 1.8 if fold == selected else 0.8
        line, = ax.plot(tr, lw=width, label=f'fold {fold} train')
        ax.plot(va, lw=width, ls='--', color=line.get_color(), label=f'fold {fold} validation')
    ax.set_yscale('log')
    ax.set_xlabel('epoch')
    ax.set_ylabel('MSE of MRE [m²]')
    ax.legend(fontsize=6, ncol=2)
    return _save(fig, path)
