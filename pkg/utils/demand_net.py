"""
Physics-informed demand estimator.

A fully connected network maps whitened pressures to non-negative estimates
of the unknown irregular demands. It has no demand labels: its outputs feed
the pairwise regression layer and the loss is the mean squared off-diagonal
reconstruction error, so gradients reach the network only through the
physics of the pairwise model.

The OLS intercepts already hold the mean effect of the omitted demands, so
latent channels enter centred, kd_u (Q_u^2 - mu_u), with mu_u the batch mean
in train mode and the stored training-window mean in eval mode. Exported
coefficients fold the centre back into k0.

Everything runs in float64 on the CPU. A training run is single-threaded and
bitwise reproducible for a fixed seed.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import nn

from utils.artifacts import read_json, write_json
from utils.errors import ConfigError, ContractError, NonFiniteError, TrainingError
from utils.ingest import PressurePanel, max_abs_scale
from utils.regression import CoefficientSet, estimate_tensor

logger = logging.getLogger(__name__)

FORMAT_NAME = 'leakwatch.demand-net'
FORMAT_VERSION = 2
DTYPE = torch.float64
BN_EPS = 1e-5
EIGEN_FLOOR = 1e-9
NORM_EPS = 1e-30
MIN_RESIDUAL = 1e-9  # meters head


@dataclass(frozen=True)
class NetworkParams:
    hidden_layers: int = 2
    hidden_width: int = 32
    learning_rate: float = 3e-3
    batch_size: int = 288
    epochs: int = 200
    patience: int = 20
    folds: int = 5
    negative_slope: float = 0.01
    unknown_demands: int = 2
    sparsity_weight: float = 0.05
    include_known_demands: bool = False

    def __post_init__(self):
        if self.hidden_layers < 0 or self.hidden_width < 1:
            raise ConfigError('network needs hidden_layers >= 0 and hidden_width >= 1')
        if not self.learning_rate > 0:
            raise ConfigError(f'learning rate must be > 0, got {self.learning_rate}')
        if self.batch_size < 2:
            raise ConfigError('batch size must be >= 2 for batch normalisation')
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError('epochs and patience must be >= 1')
        if self.folds < 2:
            raise ConfigError('cross-validation needs at least 2 folds')
        if self.unknown_demands < 1:
            raise ConfigError('at least one unknown demand channel is required')
        if not self.sparsity_weight >= 0:
            raise ConfigError(f'sparsity weight must be >= 0, got {self.sparsity_weight}')

    @property
    def hidden(self) -> Tuple[int, ...]:
        return (self.hidden_width,) * self.hidden_layers

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InputWhitening:
    """
    Zero-phase (ZCA) whitening of the network inputs.

    The common diurnal mode dominates raw pressures by orders of magnitude;
    after whitening the training window has zero mean and identity
    covariance, so the small differential signals the demands leave behind
    reach the first layer at unit scale. Eigenvalues below EIGEN_FLOOR times
    the largest are floored.
    """
    mean: np.ndarray
    matrix: np.ndarray

    @classmethod
    def fit(cls, raw: np.ndarray) -> 'InputWhitening':
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] < 2:
            raise ContractError(f'whitening needs a T×C matrix with T >= 2, got {raw.shape}')
        mean = raw.mean(axis=0)
        cov = np.atleast_2d(np.cov(raw, rowvar=False, bias=True))
        values, vectors = np.linalg.eigh(cov)
        top = float(values.max())
        values = np.maximum(values, EIGEN_FLOOR * top if top > 0 else 1.0)
        return cls(mean=mean, matrix=(vectors / np.sqrt(values)) @ vectors.T)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[1] != self.mean.shape[0]:
            raise ContractError(f'whitening expects T×{self.mean.shape[0]} inputs, got {raw.shape}')
        return (raw - self.mean) @ self.matrix

    def to_dict(self) -> dict:
        return {'mean': self.mean.tolist(), 'matrix': self.matrix.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> 'InputWhitening':
        return cls(mean=np.asarray(data['mean'], dtype=np.float64),
                   matrix=np.atleast_2d(np.asarray(data['matrix'], dtype=np.float64)))


class DemandNet(nn.Module):
    """Linear -> BatchNorm -> LeakyReLU hidden blocks, then Linear -> ReLU."""

    def __init__(self, input_width: int, output_width: int,
                 hidden: Sequence[int] = (32, 32), negative_slope: float = 0.01):
        super().__init__()
        self.input_width = input_width
        self.output_width = output_width
        self.negative_slope = negative_slope
        self.hidden = tuple(hidden)

        blocks = []
        width = input_width
        for size in self.hidden:
            blocks.append(nn.Sequential(
                nn.Linear(width, size),
                nn.BatchNorm1d(size, eps=BN_EPS),
                nn.LeakyReLU(negative_slope),
            ))
            width = size
        self.blocks = nn.ModuleList(blocks)
        self.output = nn.Linear(width, output_width)
        self.clamp = nn.ReLU()
        self.to(DTYPE)
        self.reset_parameters()

    def reset_parameters(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.kaiming_uniform_(module.weight, a=self.negative_slope, nonlinearity='leaky_relu')
                nn.init.zeros_(module.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for index, block in enumerate(self.blocks):
            x = block(x)
            if not torch.isfinite(x).all():
                raise NonFiniteError('non-finite activation', layer=index)
        x = self.clamp(self.output(x))
        if not torch.isfinite(x).all():
            raise NonFiniteError('non-finite output', layer=len(self.blocks))
        return x

    def architecture(self) -> dict:
        return {
            'input_width': self.input_width,
            'output_width': self.output_width,
            'hidden': list(self.hidden),
            'negative_slope': self.negative_slope,
        }


def _as_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.from_numpy(np.array(values, dtype=np.float64))


def forward(net: DemandNet, batch, mode: str = 'eval') -> torch.Tensor:
    """
    Demand estimates (B×|D_u|) for a batch of network inputs (B×input_width).

    Raises:
        ContractError: width mismatch, unknown mode, or a train-mode batch of one.
        NonFiniteError: a layer produced a non-finite activation.
    """
    x = _as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != net.input_width:
        raise ContractError(f'network expects B×{net.input_width} inputs, got {tuple(x.shape)}')
    if mode == 'train':
        if x.shape[0] < 2:
            raise ContractError('batch normalisation needs at least 2 samples in train mode')
        net.train()
        return net(x)
    if mode == 'eval':
        net.eval()
        return net(x)
    raise ContractError(f'unknown mode {mode!r}')


class RegressionLayer(nn.Module):
    """
    The pairwise model as a network layer.

    k0, k1 and the measured-channel kd rows are frozen at their OLS values.
    Only the latent-channel kd rows train. They are held as weights times a
    fixed coupling scale in meters head, which keeps the optimiser working
    on numbers of order one. The weights start at zero, the regression-only
    model. Gauge entries of the reference sensor are masked and stay
    exactly zero.
    """

    def __init__(self, coeffs: CoefficientSet, unknown_ids: Sequence[str], coupling_scale: float = 1.0):
        super().__init__()
        if not coupling_scale > 0:
            raise ContractError(f'coupling scale must be > 0, got {coupling_scale}')
        n = len(coeffs.sensor_ids)
        self.coeffs = coeffs
        self.known_ids = tuple(coeffs.known_demand_ids)
        self.unknown_ids = tuple(unknown_ids)

        mask = torch.ones(n, dtype=DTYPE)
        mask[coeffs.reference] = 0.0
        self.register_buffer('gauge_mask', mask)
        self.register_buffer('k0', _as_tensor(coeffs.k0))
        self.register_buffer('k1', _as_tensor(coeffs.k1))
        self.register_buffer('kd_known', _as_tensor(coeffs.kd_rows(self.known_ids)).reshape(-1, n))
        self.register_buffer('coupling_scale', torch.tensor(float(coupling_scale), dtype=DTYPE))
        self.register_buffer('latent_mean', torch.zeros(len(self.unknown_ids), dtype=DTYPE))
        self.latent_weights = nn.Parameter(torch.zeros(len(self.unknown_ids), n, dtype=DTYPE))

    @property
    def kd_unknown(self) -> torch.Tensor:
        return self.coupling_scale * self.latent_weights * self.gauge_mask

    @property
    def kd(self) -> torch.Tensor:
        return torch.cat([self.kd_known, self.kd_unknown], dim=0)

    def offsets(self, centre: torch.Tensor) -> torch.Tensor:
        """k0 - sum_u centre_u kd_u; the reference entry stays zero."""
        return self.k0 - centre @ self.kd_unknown

    def centre(self, unknown: torch.Tensor) -> torch.Tensor:
        return (unknown ** 2).mean(dim=0) if self.training else self.latent_mean

    def refresh_centre(self, unknown: torch.Tensor) -> None:
        """Store the mean of Q_u^2 over eval-mode estimates for later eval-mode use."""
        with torch.no_grad():
            self.latent_mean.copy_((unknown ** 2).mean(dim=0))

    def reconstruction_error(self, pressures: torch.Tensor, known: torch.Tensor,
                             unknown: torch.Tensor) -> torch.Tensor:
        """MRE (N×N×B) for B×N pressures and B×D demand batches, zero on the diagonal."""
        demands = torch.cat([known, unknown], dim=1).T
        estimate = estimate_tensor(self.offsets(self.centre(unknown)), self.k1, self.kd, pressures.T, demands)
        n = pressures.shape[1]
        off_diagonal = 1.0 - torch.eye(n, dtype=DTYPE)
        return (pressures.T[:, None, :] - estimate) * off_diagonal[:, :, None]

    def activity(self, unknown: torch.Tensor) -> torch.Tensor:
        """
        sum_u |kd_u| mean_t Q_u^2 over the batch, in meters head.

        Invariant under the scale trade between kd_u and Q_u, and smallest
        for the unmixed decomposition when latent channels could be mixed.
        """
        norms = torch.sqrt((self.kd_unknown ** 2).sum(dim=1) + NORM_EPS)
        return (norms * (unknown ** 2).mean(dim=0)).sum()

    def trained_coefficients(self) -> CoefficientSet:
        with torch.no_grad():
            k0 = self.offsets(self.latent_mean).numpy().copy()
            rows = self.kd_unknown.numpy().copy()
        k0[self.coeffs.reference] = 0.0
        rows[:, self.coeffs.reference] = 0.0
        base = CoefficientSet(
            sensor_ids=self.coeffs.sensor_ids, k0=k0, k1=self.coeffs.k1,
            kd=self.coeffs.kd_rows(self.known_ids), demand_ids=self.known_ids,
            known_demand_ids=self.known_ids, reference=self.coeffs.reference,
            residual_rms=self.coeffs.residual_rms,
        )
        return base.with_unknown_demands(self.unknown_ids, rows)


@dataclass
class Batch:
    inputs: torch.Tensor
    pressures: torch.Tensor
    known: torch.Tensor

    def subset(self, index) -> 'Batch':
        return Batch(self.inputs[index], self.pressures[index], self.known[index])

    def __len__(self) -> int:
        return self.inputs.shape[0]


def reconstruction_loss(layer: RegressionLayer, batch: Batch, unknown: torch.Tensor) -> torch.Tensor:
    mre = layer.reconstruction_error(batch.pressures, batch.known, unknown)
    n, b = batch.pressures.shape[1], len(batch)
    return (mre ** 2).sum() / (n * (n - 1) * b)


def pinn_loss(net: DemandNet, layer: RegressionLayer, batch: Batch, mode: str = 'train') -> torch.Tensor:
    """Mean squared off-diagonal MRE over the batch, demands taken from the network."""
    unknown = forward(net, batch.inputs, mode)
    layer.train(mode == 'train')
    return reconstruction_loss(layer, batch, unknown)


def gradients(net: DemandNet, layer: RegressionLayer, batch: Batch) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of pinn_loss for every trainable parameter.

    Keys are 'net.<name>' and 'regression.<name>'.

    Raises:
        NonFiniteError: the loss or a gradient is not finite.
    """
    params = {f'net.{k}': p for k, p in net.named_parameters()}
    params.update({f'regression.{k}': p for k, p in layer.named_parameters() if p.requires_grad})
    for p in params.values():
        p.grad = None
    loss = pinn_loss(net, layer, batch, mode='train')
    if not torch.isfinite(loss):
        raise NonFiniteError(f'loss is {loss.item()}')
    loss.backward()
    grads = {}
    for name, p in params.items():
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(grad).all():
            raise NonFiniteError(f'non-finite gradient for {name}')
        grads[name] = grad
    return grads


def kfold_blocks(length: int, k: int = 5) -> List[np.ndarray]:
    """Contiguous validation blocks that partition range(length)."""
    if k < 2 or length < 2 * k:
        raise ContractError(f'cannot split {length} samples into {k} folds')
    return np.array_split(np.arange(length), k)


@dataclass(frozen=True)
class FoldReport:
    fold: int
    validation_start: int
    validation_stop: int
    train_losses: List[float]
    validation_losses: List[float]
    best_epoch: int
    baseline_validation_loss: float

    @property
    def best_validation_loss(self) -> float:
        return self.validation_losses[self.best_epoch]

    def to_dict(self) -> dict:
        return {
            'fold': self.fold,
            'validation_start': self.validation_start,
            'validation_stop': self.validation_stop,
            'train_losses': self.train_losses,
            'validation_losses': self.validation_losses,
            'best_epoch': self.best_epoch,
            'baseline_validation_loss': self.baseline_validation_loss,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'FoldReport':
        return cls(**data)


@dataclass(frozen=True)
class TrainedModel:
    net: DemandNet = field(repr=False)
    coefficients: CoefficientSet
    whitening: InputWhitening = field(repr=False)
    latent_mean: np.ndarray
    params: NetworkParams
    unknown_ids: Tuple[str, ...]
    fold_reports: List[FoldReport]
    selected_fold: int
    seed: int

    def network_inputs(self, panel: PressurePanel) -> np.ndarray:
        raw = _raw_inputs(panel, self.coefficients.known_demand_ids, self.params.include_known_demands)
        return self.whitening.apply(raw)

    def to_dict(self) -> dict:
        state = {k: v.detach().tolist() for k, v in self.net.state_dict().items()}
        return {
            'format': FORMAT_NAME,
            'version': FORMAT_VERSION,
            'architecture': self.net.architecture(),
            'state': state,
            'coefficients': self.coefficients.to_dict(),
            'whitening': self.whitening.to_dict(),
            'latent_mean': np.asarray(self.latent_mean).tolist(),
            'params': self.params.to_dict(),
            'unknown_ids': list(self.unknown_ids),
            'fold_reports': [r.to_dict() for r in self.fold_reports],
            'selected_fold': self.selected_fold,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'TrainedModel':
        if data.get('format') != FORMAT_NAME:
            raise ContractError(f'not a demand-network document: format={data.get("format")!r}')
        if data.get('version') != FORMAT_VERSION:
            raise ContractError(f'unsupported demand-network format version {data.get("version")!r}')
        arch = data['architecture']
        net = DemandNet(arch['input_width'], arch['output_width'], arch['hidden'], arch['negative_slope'])
        reference = net.state_dict()
        net.load_state_dict({
            k: torch.tensor(v, dtype=reference[k].dtype) for k, v in data['state'].items()
        })
        net.eval()
        return cls(
            net=net,
            coefficients=CoefficientSet.from_dict(data['coefficients']),
            whitening=InputWhitening.from_dict(data['whitening']),
            latent_mean=np.asarray(data['latent_mean'], dtype=np.float64),
            params=NetworkParams(**data['params']),
            unknown_ids=tuple(data['unknown_ids']),
            fold_reports=[FoldReport.from_dict(r) for r in data['fold_reports']],
            selected_fold=int(data['selected_fold']),
            seed=int(data['seed']),
        )


def save_model(model: TrainedModel, path: Union[str, Path], header: Optional[dict] = None) -> Path:
    return write_json(Path(path), model.to_dict(), header)


def load_model(path: Union[str, Path]) -> TrainedModel:
    data = read_json(Path(path))
    data.pop('provenance', None)
    return TrainedModel.from_dict(data)


def configure_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def _raw_inputs(panel: PressurePanel, known_ids: Sequence[str], include_known: bool) -> np.ndarray:
    columns = [panel.values.T]
    if include_known:
        columns.append(panel.demand_matrix(known_ids).T)
    return np.hstack(columns)


def _residual_scale(base: CoefficientSet, data: Batch, unknown_ids: Sequence[str]) -> float:
    """RMS off-diagonal MRE of the regression-only model, in meters head."""
    layer = RegressionLayer(base, unknown_ids)
    with torch.no_grad():
        zero = torch.zeros(len(data), len(unknown_ids), dtype=DTYPE)
        return float(torch.sqrt(reconstruction_loss(layer, data, zero)))


def _train_fold(fold: int, data: Batch, validation: np.ndarray, base: CoefficientSet,
                unknown_ids: Sequence[str], params: NetworkParams, seed: int,
                coupling_scale: float, sparsity: float):
    fold_seed = seed * 1000 + fold
    torch.manual_seed(fold_seed)
    generator = torch.Generator().manual_seed(fold_seed)

    net = DemandNet(data.inputs.shape[1], len(unknown_ids), params.hidden, params.negative_slope)
    layer = RegressionLayer(base, unknown_ids, coupling_scale)
    optimizer = torch.optim.Adam(list(net.parameters()) + [layer.latent_weights], lr=params.learning_rate)

    mask = np.ones(len(data), dtype=bool)
    mask[validation] = False
    train_set = data.subset(torch.as_tensor(np.flatnonzero(mask)))
    valid_set = data.subset(torch.as_tensor(validation))

    with torch.no_grad():
        zero = torch.zeros(len(valid_set), len(unknown_ids), dtype=DTYPE)
        baseline = float(reconstruction_loss(layer, valid_set, zero))

    train_losses: List[float] = []
    valid_losses: List[float] = []
    best_epoch, best_state = -1, None
    for epoch in range(params.epochs):
        order = torch.randperm(len(train_set), generator=generator)
        total = 0.0
        for start in range(0, len(order), params.batch_size):
            index = order[start:start + params.batch_size]
            if len(index) < 2:
                continue
            batch = train_set.subset(index)
            optimizer.zero_grad()
            try:
                unknown = forward(net, batch.inputs, mode='train')
                layer.train()
                loss = reconstruction_loss(layer, batch, unknown)
                objective = loss + sparsity * layer.activity(unknown)
            except NonFiniteError as e:
                raise TrainingError(str(e), fold, epoch)
            if not torch.isfinite(objective):
                raise TrainingError('loss diverged', fold, epoch)
            objective.backward()
            optimizer.step()
            total += loss.item() * len(index)

        with torch.no_grad():
            try:
                layer.refresh_centre(forward(net, train_set.inputs, mode='eval'))
                valid = pinn_loss(net, layer, valid_set, mode='eval').item()
            except NonFiniteError as e:
                raise TrainingError(str(e), fold, epoch)
        if not np.isfinite(valid):
            raise TrainingError('validation loss diverged', fold, epoch)
        train_losses.append(total / len(train_set))
        valid_losses.append(valid)

        if best_state is None or valid < valid_losses[best_epoch]:
            best_epoch = epoch
            best_state = (copy.deepcopy(net.state_dict()), copy.deepcopy(layer.state_dict()))
        elif epoch - best_epoch >= params.patience:
            logger.debug('fold %d: early stop at epoch %d (best %d)', fold, epoch, best_epoch)
            break

    net.load_state_dict(best_state[0])
    layer.load_state_dict(best_state[1])
    net.eval()
    layer.eval()
    report = FoldReport(
        fold=fold,
        validation_start=int(validation[0]),
        validation_stop=int(validation[-1]) + 1,
        train_losses=train_losses,
        validation_losses=valid_losses,
        best_epoch=best_epoch,
        baseline_validation_loss=baseline,
    )
    logger.info('fold %d: best validation loss %.4e at epoch %d (zero-demand baseline %.4e)',
                fold, report.best_validation_loss, best_epoch, baseline)
    return net, layer, report


def train(
    panel: PressurePanel,
    base_coeffs: CoefficientSet,
    params: NetworkParams = NetworkParams(),
    seed: int = 0,
    unknown_ids: Optional[Sequence[str]] = None,
) -> TrainedModel:
    """
    Train the demand network jointly with the latent-channel couplings.

    The training objective adds sparsity_weight times the RMS regression-only
    residual times the latent activity (see RegressionLayer.activity) to the
    reconstruction loss. Validation and early stopping use the plain loss.

    Args:
        panel: Anomaly-free training window carrying the measured channels.
        base_coeffs: OLS fit on the same window (measured channels only).
        params: Network and optimisation settings.
        seed: Fold f is initialised from seed * 1000 + f.
        unknown_ids: Names of the latent channels; defaults to u1, u2, ...

    Returns:
        The fold model with the lowest validation loss.

    Raises:
        TrainingError: the loss became non-finite.
    """
    if panel.sensor_ids != base_coeffs.sensor_ids:
        raise ContractError('panel and coefficients cover different sensors')
    if base_coeffs.unknown_demand_ids:
        raise ContractError('base coefficients already carry latent channels')
    unknown_ids = tuple(unknown_ids or (f'u{k + 1}' for k in range(params.unknown_demands)))
    clash = set(unknown_ids) & set(base_coeffs.demand_ids)
    if clash:
        raise ContractError(f'latent channel ids {sorted(clash)} collide with measured channels')

    configure_determinism(seed)
    known_ids = base_coeffs.known_demand_ids
    raw = _raw_inputs(panel, known_ids, params.include_known_demands)
    whitening = InputWhitening.fit(raw)
    data = Batch(_as_tensor(whitening.apply(raw)), _as_tensor(panel.values.T),
                 _as_tensor(panel.demand_matrix(known_ids).T))

    residual = max(_residual_scale(base_coeffs, data, unknown_ids), MIN_RESIDUAL)
    coupling_scale = 2.0 * residual
    sparsity = params.sparsity_weight * residual
    logger.info('regression-only residual %.4e m; coupling scale %.4e, sparsity weight %.4e',
                residual, coupling_scale, sparsity)

    results = []
    for fold, validation in enumerate(kfold_blocks(panel.length, params.folds)):
        results.append(_train_fold(fold, data, validation, base_coeffs, unknown_ids, params, seed,
                                   coupling_scale, sparsity))

    reports = [r for _, _, r in results]
    best = min(range(len(results)), key=lambda f: reports[f].best_validation_loss)
    net, layer, _ = results[best]
    logger.info('selected fold %d of %d (validation loss %.4e)', best, len(results),
                reports[best].best_validation_loss)
    return TrainedModel(
        net=net,
        coefficients=layer.trained_coefficients(),
        whitening=whitening,
        latent_mean=layer.latent_mean.numpy().copy(),
        params=params,
        unknown_ids=unknown_ids,
        fold_reports=reports,
        selected_fold=best,
        seed=seed,
    )


def estimate_demands(model: TrainedModel, panel: PressurePanel) -> np.ndarray:
    """Latent demand estimates (|D_u|×T) in eval mode."""
    if panel.sensor_ids != model.coefficients.sensor_ids:
        raise ContractError('panel sensors do not match the trained model')
    with torch.no_grad():
        out = forward(model.net, model.network_inputs(panel), mode='eval')
    return out.numpy().T.copy()


def demand_recovery_r2(estimate: np.ndarray, truth: np.ndarray) -> float:
    """R² of the max-abs normalised estimate against the max-abs normalised truth."""
    est, _ = max_abs_scale(estimate)
    ref, _ = max_abs_scale(truth)
    total = float(((ref - ref.mean()) ** 2).sum())
    if total == 0.0:
        return float('nan')
    return 1.0 - float(((ref - est) ** 2).sum()) / total


def match_channels(estimates: np.ndarray, truths: np.ndarray) -> List[Tuple[int, int, float]]:
    """
    Pair estimated channels with truth channels to maximise total R².

    The network's output order is arbitrary. Returns (estimate index, truth
    index, R²) triples for the optimal assignment.
    """
    estimates = np.atleast_2d(estimates)
    truths = np.atleast_2d(truths)
    scores = np.array([[demand_recovery_r2(e, t) for t in truths] for e in estimates])
    rows, cols = linear_sum_assignment(np.nan_to_num(scores, nan=-1e9), maximize=True)
    return [(int(r), int(c), float(scores[r, c])) for r, c in zip(rows, cols)]
