"""
Pairwise linear pressure model.

For every pair of sensors i, j the energy balance

    k0_i + k1_i P_i + sum_d kd_{d,i} Q_d^2  =  k0_j + k1_j P_j + sum_d kd_{d,j} Q_d^2

holds while demands follow the shared diurnal pattern. Solving it for P_i
from every sensor j yields an N×N estimate tensor (column j estimates all
sensors from sensor j). The model reconstruction error is the observed
pressure minus that estimate; the diagonal is identically zero.

The balance is unchanged by a global positive scale, by a constant added to
every k0, and by a constant added to every kd_{d,.} of one channel. The gauge
pins a reference sensor r: k0_r = 0, k1_r = 1 and kd_{d,r} = 0.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from utils.errors import ContractError, DegenerateSensorError, SingularFitError
from utils.ingest import PressurePanel, TimeAxis

logger = logging.getLogger(__name__)

MIN_SLOPE = 1e-9
FORMAT_NAME = 'leakwatch.coefficients'
FORMAT_VERSION = 1

MRE_MODES = ('per-pair', 'mean')


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CoefficientSet:
    """
    Gauge-fixed coefficients of the pairwise model.

    kd has one row per demand channel in demand_ids. Channels listed in
    known_demand_ids are measured (D_k); the others are latent (D_u) and get
    their rows from demand-network training.
    """
    sensor_ids: Tuple[str, ...]
    k0: np.ndarray
    k1: np.ndarray
    kd: np.ndarray
    demand_ids: Tuple[str, ...] = ()
    known_demand_ids: Tuple[str, ...] = ()
    reference: int = 0
    residual_rms: float = float('nan')

    def __post_init__(self):
        n = len(self.sensor_ids)
        k0, k1 = _frozen(self.k0), _frozen(self.k1)
        kd = _frozen(np.asarray(self.kd, dtype=np.float64).reshape(len(self.demand_ids), n))
        if k0.shape != (n,) or k1.shape != (n,):
            raise ContractError(f'k0/k1 must have one entry per sensor ({n})')
        unknown_known = set(self.known_demand_ids) - set(self.demand_ids)
        if unknown_known:
            raise ContractError(f'known demand ids {sorted(unknown_known)} are not demand channels')
        if not 0 <= self.reference < n:
            raise ContractError(f'reference index {self.reference} out of range')

        r = self.reference
        if k0[r] != 0.0 or k1[r] != 1.0 or (kd.size and np.any(kd[:, r] != 0.0)):
            raise ContractError(f'gauge violated at reference sensor {self.sensor_ids[r]!r}')
        for i, slope in enumerate(k1):
            if abs(slope) < MIN_SLOPE:
                raise DegenerateSensorError(self.sensor_ids[i], float(slope))

        object.__setattr__(self, 'sensor_ids', tuple(self.sensor_ids))
        object.__setattr__(self, 'demand_ids', tuple(self.demand_ids))
        object.__setattr__(self, 'known_demand_ids', tuple(self.known_demand_ids))
        object.__setattr__(self, 'k0', k0)
        object.__setattr__(self, 'k1', k1)
        object.__setattr__(self, 'kd', kd)

    @property
    def unknown_demand_ids(self) -> Tuple[str, ...]:
        return tuple(d for d in self.demand_ids if d not in self.known_demand_ids)

    def kd_rows(self, ids: Sequence[str]) -> np.ndarray:
        missing = [d for d in ids if d not in self.demand_ids]
        if missing:
            raise ContractError(f'no coefficients for demand channel(s) {missing}')
        if not ids:
            return np.zeros((0, len(self.sensor_ids)))
        return self.kd[[self.demand_ids.index(d) for d in ids]]

    def with_unknown_demands(self, ids: Sequence[str], rows: np.ndarray) -> 'CoefficientSet':
        """Append (or replace) rows for latent demand channels."""
        rows = np.asarray(rows, dtype=np.float64).reshape(len(ids), len(self.sensor_ids))
        keep = [d for d in self.demand_ids if d not in ids]
        return CoefficientSet(
            sensor_ids=self.sensor_ids,
            k0=self.k0, k1=self.k1,
            kd=np.vstack([self.kd_rows(keep), rows]),
            demand_ids=tuple(keep) + tuple(ids),
            known_demand_ids=tuple(d for d in self.known_demand_ids if d not in ids),
            reference=self.reference,
            residual_rms=self.residual_rms,
        )

    def to_dict(self) -> dict:
        return {
            'format': FORMAT_NAME,
            'version': FORMAT_VERSION,
            'sensor_ids': list(self.sensor_ids),
            'demand_ids': list(self.demand_ids),
            'known_demand_ids': list(self.known_demand_ids),
            'gauge': {'reference': self.reference, 'sensor': self.sensor_ids[self.reference]},
            'k0': self.k0.tolist(),
            'k1': self.k1.tolist(),
            'kd': self.kd.tolist(),
            'residual_rms': None if np.isnan(self.residual_rms) else float(self.residual_rms),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'CoefficientSet':
        if data.get('format') != FORMAT_NAME:
            raise ContractError(f'not a coefficient document: format={data.get("format")!r}')
        if data.get('version') != FORMAT_VERSION:
            raise ContractError(f'unsupported coefficient format version {data.get("version")!r}')
        rms = data.get('residual_rms')
        return cls(
            sensor_ids=tuple(data['sensor_ids']),
            k0=np.asarray(data['k0']),
            k1=np.asarray(data['k1']),
            kd=np.asarray(data['kd'], dtype=np.float64),
            demand_ids=tuple(data['demand_ids']),
            known_demand_ids=tuple(data['known_demand_ids']),
            reference=int(data['gauge']['reference']),
            residual_rms=float('nan') if rms is None else float(rms),
        )


def gauge_fix_arrays(k0, k1, kd, reference: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Move raw coefficients into the gauge of the reference sensor."""
    k0 = np.asarray(k0, dtype=np.float64)
    k1 = np.asarray(k1, dtype=np.float64)
    kd = np.asarray(kd, dtype=np.float64).reshape(-1, k0.size)
    scale = k1[reference]
    if abs(scale) < MIN_SLOPE:
        raise DegenerateSensorError(str(reference), float(scale))
    k0 = (k0 - k0[reference]) / scale
    k1 = k1 / scale
    kd = (kd - kd[:, [reference]]) / scale
    # exact after the division
    k0[reference], k1[reference] = 0.0, 1.0
    kd[:, reference] = 0.0
    return k0, k1, kd


def from_raw(
    sensor_ids: Sequence[str],
    k0, k1, kd,
    demand_ids: Sequence[str] = (),
    known_demand_ids: Sequence[str] = (),
    reference: int = 0,
) -> CoefficientSet:
    """Build a gauge-fixed CoefficientSet from coefficients in any gauge."""
    k0, k1, kd = gauge_fix_arrays(k0, k1, kd, reference)
    return CoefficientSet(
        sensor_ids=tuple(sensor_ids), k0=k0, k1=k1, kd=kd,
        demand_ids=tuple(demand_ids), known_demand_ids=tuple(known_demand_ids),
        reference=reference,
    )


def gauge_fix(coeffs: CoefficientSet, reference: int) -> CoefficientSet:
    """Re-express a coefficient set in the gauge of another reference sensor."""
    fixed = from_raw(
        coeffs.sensor_ids, coeffs.k0, coeffs.k1, coeffs.kd,
        coeffs.demand_ids, coeffs.known_demand_ids, reference,
    )
    object.__setattr__(fixed, 'residual_rms', coeffs.residual_rms)
    return fixed


@dataclass(frozen=True)
class DesignSystem:
    """Stacked pairwise equations A x = b over the free (non-gauge) coefficients."""
    matrix: np.ndarray
    rhs: np.ndarray
    columns: List[str]
    pairs: List[Tuple[int, int]]


def sensor_pairs(n: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def design_rows(
    panel: PressurePanel,
    demands: Optional[np.ndarray] = None,
    demand_ids: Optional[Sequence[str]] = None,
    reference: int = 0,
) -> DesignSystem:
    """
    Build the linear system of the pairwise balance.

    For each unordered pair (i, j), i < j, and each timestep t one row reads

        (k0_i - k0_j) + k1_i P_i(t) - k1_j P_j(t) + sum_d (kd_{d,i} - kd_{d,j}) Q_d(t)^2 = 0

    with the reference sensor's k0, k1 and kd entries eliminated: its k1 P_r
    term moves to the right-hand side, the others vanish.

    Args:
        panel: Pressures (N×T).
        demands: D×T non-negative flows aligned with the panel.
        demand_ids: Labels for the demand rows (defaults to d0, d1, ...).
        reference: Gauge sensor index.

    Returns:
        DesignSystem with M·T rows (M = N(N-1)/2) and (2 + D)(N - 1) columns.
    """
    n, t = panel.n_sensors, panel.length
    demands = np.zeros((0, t)) if demands is None else np.asarray(demands, dtype=np.float64)
    if demands.ndim != 2 or demands.shape[1] != t:
        raise ContractError(f'demands must be D×{t}, got {demands.shape}')
    if (demands < 0).any():
        raise ContractError('demand flows must be non-negative')
    d = demands.shape[0]
    if demand_ids is None:
        demand_ids = [f'd{k}' for k in range(d)]

    free = [s for s in range(n) if s != reference]
    sid = panel.sensor_ids
    columns = (
        [f'k0[{sid[s]}]' for s in free]
        + [f'k1[{sid[s]}]' for s in free]
        + [f'kd[{demand_ids[k]},{sid[s]}]' for k in range(d) for s in free]
    )
    col_k0 = {s: c for c, s in enumerate(free)}
    col_k1 = {s: len(free) + c for c, s in enumerate(free)}

    def col_kd(k: int, s: int) -> int:
        return 2 * len(free) + k * len(free) + free.index(s)

    pairs = sensor_pairs(n)
    pressures = panel.values
    squared = demands ** 2
    matrix = np.zeros((len(pairs) * t, len(columns)))
    rhs = np.zeros(len(pairs) * t)

    for m, (i, j) in enumerate(pairs):
        block = slice(m * t, (m + 1) * t)
        for s, sign in ((i, 1.0), (j, -1.0)):
            if s == reference:
                rhs[block] -= sign * pressures[s]
                continue
            matrix[block, col_k0[s]] = sign
            matrix[block, col_k1[s]] = sign * pressures[s]
            for k in range(d):
                matrix[block, col_kd(k, s)] = sign * squared[k]

    return DesignSystem(matrix=matrix, rhs=rhs, columns=columns, pairs=pairs)


def solve_least_squares(system: DesignSystem) -> np.ndarray:
    """
    Column-equilibrated, column-pivoted QR least squares.

    Raises:
        SingularFitError: the system is rank deficient; names the dependent columns.
    """
    a, b = system.matrix, system.rhs
    if a.shape[0] < a.shape[1]:
        raise SingularFitError(system.columns[a.shape[0]:])

    norms = np.linalg.norm(a, axis=0)
    zero = norms == 0
    if zero.any():
        raise SingularFitError([c for c, z in zip(system.columns, zero) if z])
    scaled = a / norms

    q, r, piv = linalg.qr(scaled, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(a.shape) * np.finfo(np.float64).eps * diag[0]
    rank = int((diag > tol).sum())
    if rank < a.shape[1]:
        raise SingularFitError([system.columns[p] for p in piv[rank:]])

    solution = np.empty(a.shape[1])
    solution[piv] = linalg.solve_triangular(r, q.T @ b)
    return solution / norms


def fit_ols(
    panel: PressurePanel,
    known_demand_ids: Optional[Sequence[str]] = None,
    reference: Union[int, str] = 0,
    demands: Optional[np.ndarray] = None,
) -> CoefficientSet:
    """
    Fit the gauge-fixed coefficients by ordinary least squares.

    Args:
        panel: Anomaly-free training window.
        known_demand_ids: Measured channels (D_k) to include; defaults to every
            demand channel carried by the panel.
        reference: Gauge sensor, as index or id.
        demands: Optional D×T flows overriding the panel's channels (used when
            ground-truth channels are revealed to the model).

    Returns:
        CoefficientSet with residual RMS of the stacked system. Latent channels
        are absent at this stage.

    Raises:
        SingularFitError: rank-deficient system.
        DegenerateSensorError: some |k1| below 1e-9.
    """
    ref = panel.sensor_index(reference) if isinstance(reference, str) else int(reference)
    ids = list(panel.demand_ids if known_demand_ids is None else known_demand_ids)
    flows = panel.demand_matrix(ids) if demands is None else np.asarray(demands, dtype=np.float64)
    if flows.shape != (len(ids), panel.length):
        raise ContractError(f'demands must be {len(ids)}×{panel.length}, got {flows.shape}')

    system = design_rows(panel, flows, ids, reference=ref)
    if panel.length < len(system.columns):
        raise ContractError(
            f'{panel.length} samples cannot determine {len(system.columns)} free coefficients'
        )
    x = solve_least_squares(system)
    residual = system.matrix @ x - system.rhs
    rms = float(np.sqrt(np.mean(residual ** 2)))

    n, free = panel.n_sensors, [s for s in range(panel.n_sensors) if s != ref]
    k0, k1 = np.zeros(n), np.ones(n)
    kd = np.zeros((len(ids), n))
    f = len(free)
    k0[free] = x[:f]
    k1[free] = x[f:2 * f]
    for k in range(len(ids)):
        kd[k, free] = x[2 * f + k * f:2 * f + (k + 1) * f]

    coeffs = CoefficientSet(
        sensor_ids=panel.sensor_ids, k0=k0, k1=k1, kd=kd,
        demand_ids=tuple(ids), known_demand_ids=tuple(ids),
        reference=ref, residual_rms=rms,
    )
    logger.info('OLS fit on %d samples, %d pairs, %d free coefficients: residual rms %.3e',
                panel.length, len(system.pairs), len(system.columns), rms)
    return coeffs


def estimate_tensor(k0, k1, kd, pressures, demands):
    """
    Pairwise pressure estimates, entry [i, j, t] estimating P_i(t) from sensor j.

        (k0_j - k0_i)/k1_i + (k1_j/k1_i) P_j + sum_d ((kd_{d,j} - kd_{d,i})/k1_i) Q_d^2

    Uses only indexing, broadcasting and matmul, so it evaluates numpy arrays
    and torch tensors alike (the demand network differentiates through it).
    """
    n, t = pressures.shape[0], pressures.shape[1]
    offset = (k0[None, :] - k0[:, None]) / k1[:, None]
    ratio = k1[None, :] / k1[:, None]
    estimate = offset[:, :, None] + ratio[:, :, None] * pressures[None, :, :]
    d = kd.shape[0]
    if d:
        coupling = (kd[:, None, :] - kd[:, :, None]) / k1[None, :, None]
        estimate = estimate + (coupling.reshape(d, n * n).T @ demands ** 2).reshape(n, n, t)
    return estimate


def assemble_demands(
    coeffs: CoefficientSet,
    panel: PressurePanel,
    unknown: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Demand matrix ordered like coeffs.demand_ids: measured channels from the
    panel, latent channels from `unknown` (rows ordered like
    coeffs.unknown_demand_ids).
    """
    latent = coeffs.unknown_demand_ids
    if latent and unknown is None:
        raise ContractError(f'latent demand channel(s) {list(latent)} need estimates')
    unknown = np.zeros((0, panel.length)) if unknown is None else np.asarray(unknown, dtype=np.float64)
    if unknown.shape != (len(latent), panel.length):
        raise ContractError(f'latent demands must be {len(latent)}×{panel.length}, got {unknown.shape}')

    rows = []
    for d in coeffs.demand_ids:
        if d in latent:
            rows.append(unknown[latent.index(d)])
        else:
            rows.append(panel.demand_matrix([d])[0])
    return np.vstack(rows) if rows else np.zeros((0, panel.length))


def predict_pressure(
    coeffs: CoefficientSet,
    panel: PressurePanel,
    demands: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Evaluate the N×N×T estimate tensor.

    Args:
        coeffs: Fitted coefficients.
        panel: Observed pressures; its sensor ids must match coeffs.
        demands: D×T flows ordered like coeffs.demand_ids. Defaults to the
            panel's measured channels (valid when there are no latent channels).

    Raises:
        ContractError: sensor mismatch or a missing demand channel.
    """
    if panel.sensor_ids != coeffs.sensor_ids:
        raise ContractError(
            f'panel sensors {panel.sensor_ids} do not match model sensors {coeffs.sensor_ids}'
        )
    if demands is None:
        demands = assemble_demands(coeffs, panel)
    demands = np.asarray(demands, dtype=np.float64)
    if demands.shape != (len(coeffs.demand_ids), panel.length):
        raise ContractError(
            f'demands must cover channels {list(coeffs.demand_ids)} over {panel.length} samples, '
            f'got shape {demands.shape}'
        )
    return estimate_tensor(coeffs.k0, coeffs.k1, coeffs.kd, panel.values, demands)


@dataclass(frozen=True)
class MreSeries:
    axis: TimeAxis
    sensor_ids: Tuple[str, ...]
    full: np.ndarray
    reduced: np.ndarray
    pair_index: Tuple[Tuple[int, int], ...]
    mode: str = 'per-pair'

    @property
    def series_ids(self) -> List[str]:
        if self.mode == 'mean':
            return ['mean']
        return [f'{self.sensor_ids[i]}-{self.sensor_ids[j]}' for i, j in self.pair_index]


def reduce_mre(full: np.ndarray, mode: str = 'per-pair') -> Tuple[np.ndarray, Tuple[Tuple[int, int], ...]]:
    """
    Series monitored by detection.

    per-pair: one row per unordered pair i < j.
    mean: the mean of |MRE| over all ordered off-diagonal pairs (ordered pairs
    carry opposite signs, so a plain mean would cancel).
    """
    if mode not in MRE_MODES:
        raise ContractError(f'unknown MRE mode {mode!r}; expected one of {MRE_MODES}')
    n = full.shape[0]
    pairs = tuple(sensor_pairs(n))
    if mode == 'per-pair':
        return np.stack([full[i, j] for i, j in pairs]), pairs
    off = ~np.eye(n, dtype=bool)
    return np.abs(full[off]).mean(axis=0)[None, :], pairs


def model_reconstruction_error(
    panel: PressurePanel,
    estimate: np.ndarray,
    mode: str = 'per-pair',
) -> MreSeries:
    """MRE[i, j, t] = P_i(t) - estimate[i, j, t], with an exactly zero diagonal."""
    n, t = panel.n_sensors, panel.length
    if estimate.shape != (n, n, t):
        raise ContractError(f'estimate must be {n}×{n}×{t}, got {estimate.shape}')
    full = panel.values[:, None, :] - estimate
    full[np.arange(n), np.arange(n), :] = 0.0
    reduced, pairs = reduce_mre(full, mode)
    return MreSeries(
        axis=panel.axis, sensor_ids=panel.sensor_ids,
        full=_frozen(full), reduced=_frozen(reduced), pair_index=pairs, mode=mode,
    )
