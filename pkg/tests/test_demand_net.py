"""Tests for utils/demand_net.py: network, regression layer, training and persistence."""
import math

import numpy as np
import pytest
import torch

from tests.conftest import balanced_panel
from utils.demand_net import (
    BN_EPS, Batch, DemandNet, InputWhitening, NetworkParams, RegressionLayer, TrainedModel,
    demand_recovery_r2, estimate_demands, forward, gradients, kfold_blocks, load_model, match_channels,
    pinn_loss, save_model, train,
)
from utils.errors import ConfigError, ContractError, NonFiniteError
from utils.ingest import PressurePanel
from utils.regression import estimate_tensor, fit_ols, from_raw

TINY = NetworkParams(hidden_layers=1, hidden_width=6, batch_size=64, epochs=15, patience=5,
                     folds=2, unknown_demands=1)
SENSORS = ('s1', 's2', 's3')
TRUE_K0 = [0.0, 1.8, -1.2]
TRUE_K1 = [1.0, 0.92, 1.07]


def hidden_demand_panel(length=256, seed=0):
    """Pressures shaped by a demand channel the panel does not carry."""
    full = balanced_panel(length=length, seed=seed)
    return PressurePanel(axis=full.axis, sensor_ids=full.sensor_ids, values=full.values)


def tensor_batch(panel):
    raw = panel.values.T
    whitened = InputWhitening.fit(raw).apply(raw)
    pressures = torch.as_tensor(raw.copy())
    return Batch(torch.as_tensor(whitened), pressures, torch.zeros(panel.length, 0, dtype=torch.float64))


def exact_layer(unknown_ids=('u1',), coupling_scale=1.0):
    """Regression layer over the true coefficients of the demand-free balanced panel."""
    coeffs = from_raw(SENSORS, TRUE_K0, TRUE_K1, np.zeros((0, 3)))
    return RegressionLayer(coeffs, unknown_ids, coupling_scale)


def direct_loss(pressures, k0, k1, kd, squares):
    """Off-diagonal mean squared reconstruction error, one pair and sample at a time."""
    n, t = pressures.shape
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for s in range(t):
                head_j = k0[j] + k1[j] * pressures[j, s] + sum(kd[u, j] * squares[u, s] for u in range(len(kd)))
                latent_i = sum(kd[u, i] * squares[u, s] for u in range(len(kd)))
                estimate = (head_j - k0[i] - latent_i) / k1[i]
                total += (pressures[i, s] - estimate) ** 2
    return total / (n * (n - 1) * t)


class PreActivations:
    """Records the inputs of every kinked activation of a DemandNet."""

    def __init__(self, net):
        self.values = []
        kinks = [block[2] for block in net.blocks] + [net.clamp]
        self.handles = [m.register_forward_hook(self._record) for m in kinks]

    def _record(self, module, inputs, output):
        self.values.append(inputs[0].detach().clone())

    def take(self):
        values, self.values = self.values, []
        return values

    def close(self):
        for handle in self.handles:
            handle.remove()


def same_side(first, second):
    return all(torch.equal(a > 0, b > 0) and bool((a != 0).all()) and bool((b != 0).all())
               for a, b in zip(first, second))


class TestNetworkParams:
    def test_hidden(self):
        assert NetworkParams(hidden_layers=3, hidden_width=4).hidden == (4, 4, 4)

    @pytest.mark.parametrize('kwargs', [
        {'learning_rate': 0.0}, {'batch_size': 1}, {'folds': 1}, {'unknown_demands': 0}, {'hidden_width': 0},
        {'sparsity_weight': -0.1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            NetworkParams(**kwargs)

    def test_offsets_are_not_a_setting(self):
        with pytest.raises(TypeError):
            NetworkParams(train_offsets=True)


class TestInputWhitening:
    def test_identity_covariance_on_fitting_data(self):
        panel = hidden_demand_panel(length=400)
        raw = panel.values.T
        whitened = InputWhitening.fit(raw).apply(raw)
        np.testing.assert_allclose(whitened.mean(axis=0), 0.0, atol=1e-9)
        np.testing.assert_allclose(np.cov(whitened, rowvar=False, bias=True), np.eye(3), atol=1e-8)

    def test_constant_column_stays_finite(self):
        raw = np.column_stack([np.linspace(0.0, 1.0, 50), np.full(50, 7.0)])
        whitened = InputWhitening.fit(raw).apply(raw)
        assert np.isfinite(whitened).all()
        np.testing.assert_allclose(whitened[:, 1], 0.0, atol=1e-9)

    def test_width_mismatch(self):
        whitening = InputWhitening.fit(np.random.default_rng(0).standard_normal((20, 3)))
        with pytest.raises(ContractError):
            whitening.apply(np.zeros((5, 2)))

    def test_dict_roundtrip(self):
        raw = np.random.default_rng(1).standard_normal((30, 2))
        whitening = InputWhitening.fit(raw)
        again = InputWhitening.from_dict(whitening.to_dict())
        np.testing.assert_array_equal(again.apply(raw), whitening.apply(raw))


class TestForward:
    def test_outputs_are_non_negative(self):
        torch.manual_seed(0)
        net = DemandNet(3, 2, hidden=(8, 8))
        out = forward(net, np.random.default_rng(0).standard_normal((20, 3)), mode='train')
        assert out.shape == (20, 2)
        assert out.dtype == torch.float64
        assert (out >= 0).all()

    def test_eval_mode_accepts_single_sample(self):
        net = DemandNet(3, 1, hidden=(4,))
        assert forward(net, np.zeros((1, 3)), mode='eval').shape == (1, 1)

    def test_train_mode_needs_two_samples(self):
        with pytest.raises(ContractError):
            forward(DemandNet(3, 1, hidden=(4,)), np.zeros((1, 3)), mode='train')

    def test_width_mismatch(self):
        with pytest.raises(ContractError):
            forward(DemandNet(3, 1, hidden=(4,)), np.zeros((5, 4)))

    def test_unknown_mode(self):
        with pytest.raises(ContractError):
            forward(DemandNet(3, 1, hidden=(4,)), np.zeros((5, 3)), mode='predict')

    def test_non_finite_input_names_layer(self):
        x = np.zeros((4, 3))
        x[0, 0] = np.inf
        with pytest.raises(NonFiniteError) as info:
            forward(DemandNet(3, 1, hidden=(4,)), x, mode='eval')
        assert info.value.layer == 0

    def test_biases_start_at_zero(self):
        net = DemandNet(3, 2, hidden=(5,))
        assert torch.count_nonzero(net.output.bias) == 0
        assert torch.count_nonzero(net.blocks[0][0].bias) == 0

    def test_hand_computed_two_sample_batch(self):
        net = DemandNet(2, 1, hidden=(2,), negative_slope=0.01)
        with torch.no_grad():
            net.blocks[0][0].weight.copy_(torch.eye(2, dtype=torch.float64))
            net.output.weight.copy_(torch.tensor([[1.0, 2.0]], dtype=torch.float64))
            net.output.bias.fill_(0.5)
        out = forward(net, np.array([[1.0, 2.0], [3.0, 6.0]]), mode='train')
        # per-feature batch variances are 1 and 4, deviations are 1 and 2
        a = 1.0 / math.sqrt(1.0 + BN_EPS)
        c = 2.0 / math.sqrt(4.0 + BN_EPS)
        expected = [0.5 + 0.01 * (-a - 2.0 * c), 0.5 + a + 2.0 * c]
        np.testing.assert_allclose(out[:, 0].detach().numpy(), expected, rtol=1e-12)

    def test_batch_norm_normalises_in_train_mode(self):
        torch.manual_seed(0)
        net = DemandNet(3, 2, hidden=(8,))
        captured = []
        handle = net.blocks[0][1].register_forward_hook(
            lambda m, i, o: captured.append((i[0].detach(), o.detach())))
        forward(net, 10.0 * np.random.default_rng(2).standard_normal((64, 3)), mode='train')
        handle.remove()
        ((raw, normalised),) = captured
        variance = normalised.var(dim=0, unbiased=False)
        assert float(normalised.mean(dim=0).abs().max()) <= 1e-6
        assert float((variance - 1.0).abs().max()) <= 1e-4
        spread = raw.var(dim=0, unbiased=False)
        torch.testing.assert_close(variance, spread / (spread + BN_EPS), rtol=1e-9, atol=0.0)


class TestRegressionLayer:
    def test_zero_latent_couplings_reproduce_ols(self, plain_panel):
        coeffs = fit_ols(plain_panel)
        layer = RegressionLayer(coeffs, ('u1',))
        batch = tensor_batch(plain_panel)
        mre = layer.reconstruction_error(batch.pressures, batch.known,
                                         torch.ones(plain_panel.length, 1, dtype=torch.float64))
        assert mre.shape == (3, 3, plain_panel.length)
        assert float(mre.abs().max()) < 1e-7

    def test_only_latent_weights_train(self, plain_panel):
        coeffs = fit_ols(plain_panel)
        layer = RegressionLayer(coeffs, ('u1',))
        assert [name for name, _ in layer.named_parameters()] == ['latent_weights']
        np.testing.assert_array_equal(layer.k0.numpy(), coeffs.k0)
        np.testing.assert_array_equal(layer.k1.numpy(), coeffs.k1)
        assert not layer.k0.requires_grad and not layer.k1.requires_grad

    def test_gauge_entries_stay_zero(self, plain_panel):
        layer = RegressionLayer(fit_ols(plain_panel), ('u1', 'u2'), coupling_scale=0.3)
        with torch.no_grad():
            layer.latent_weights.fill_(0.5)
            layer.latent_mean.fill_(40.0)
        coeffs = layer.trained_coefficients()
        assert coeffs.k0[0] == 0.0
        assert (coeffs.kd_rows(['u1', 'u2'])[:, 0] == 0.0).all()
        np.testing.assert_allclose(coeffs.kd_rows(['u1', 'u2'])[:, 1:], 0.15)
        assert coeffs.unknown_demand_ids == ('u1', 'u2')

    def test_non_positive_coupling_scale(self, plain_panel):
        with pytest.raises(ContractError):
            RegressionLayer(fit_ols(plain_panel), ('u1',), coupling_scale=0.0)

    def test_train_mode_ignores_a_common_offset_in_squared_demands(self):
        layer = exact_layer()
        with torch.no_grad():
            layer.latent_weights.copy_(torch.tensor([[0.0, 0.004, 0.002]], dtype=torch.float64))
        panel = balanced_panel(length=60, with_demand=False)
        batch = tensor_batch(panel)
        unknown = torch.as_tensor(np.random.default_rng(3).uniform(0.0, 9.0, (60, 1)))
        layer.train()
        first = layer.reconstruction_error(batch.pressures, batch.known, unknown)
        second = layer.reconstruction_error(batch.pressures, batch.known, torch.sqrt(unknown ** 2 + 25.0))
        torch.testing.assert_close(first, second, rtol=0.0, atol=1e-10)

    def test_exported_coefficients_match_eval_mode(self):
        layer = exact_layer(('u1', 'u2'), coupling_scale=0.5)
        with torch.no_grad():
            layer.latent_weights.copy_(torch.tensor([[0.0, 0.006, 0.002], [0.0, 0.001, 0.007]],
                                                    dtype=torch.float64))
            layer.latent_mean.copy_(torch.tensor([20.0, 35.0], dtype=torch.float64))
        panel = balanced_panel(length=40, noise=0.05, with_demand=False)
        unknown = np.random.default_rng(5).uniform(0.0, 9.0, (40, 2))
        layer.eval()
        mre = layer.reconstruction_error(torch.as_tensor(panel.values.T.copy()),
                                         torch.zeros(40, 0, dtype=torch.float64), torch.as_tensor(unknown))
        coeffs = layer.trained_coefficients()
        estimate = estimate_tensor(coeffs.k0, coeffs.k1, coeffs.kd, panel.values, unknown.T)
        expected = (panel.values[:, None, :] - estimate) * (1.0 - np.eye(3))[:, :, None]
        np.testing.assert_allclose(mre.detach().numpy(), expected, rtol=0.0, atol=1e-10)

    def test_activity_is_invariant_under_scale_trade(self):
        layer = exact_layer(('u1', 'u2'), coupling_scale=0.2)
        weights = torch.tensor([[0.0, 3.0, 4.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        unknown = torch.as_tensor(np.random.default_rng(6).uniform(0.0, 5.0, (30, 2)))
        with torch.no_grad():
            layer.latent_weights.copy_(weights)
        value = float(layer.activity(unknown))
        means = (unknown ** 2).mean(dim=0)
        assert value == pytest.approx(0.2 * 5.0 * float(means[0]) + 0.2 * 1.0 * float(means[1]), rel=1e-12)
        with torch.no_grad():
            layer.latent_weights.copy_(4.0 * weights)
        assert float(layer.activity(unknown / 2.0)) == pytest.approx(value, rel=1e-12)


class TestPinnLoss:
    def test_matches_direct_evaluation(self):
        torch.manual_seed(1)
        layer = exact_layer(('u1', 'u2'), coupling_scale=0.5)
        with torch.no_grad():
            layer.latent_weights.copy_(torch.tensor([[0.0, 0.008, 0.002], [0.0, -0.002, 0.006]],
                                                    dtype=torch.float64))
            layer.latent_mean.copy_(torch.tensor([0.7, 1.3], dtype=torch.float64))
        panel = balanced_panel(length=24, noise=0.05, with_demand=False)
        batch = tensor_batch(panel)
        net = DemandNet(3, 2, hidden=(4,))
        loss = float(pinn_loss(net, layer, batch, mode='eval'))
        squares = forward(net, batch.inputs, mode='eval').detach().numpy().T ** 2
        kd = layer.kd_unknown.detach().numpy()
        k0 = np.asarray(TRUE_K0) - np.array([0.7, 1.3]) @ kd
        expected = direct_loss(panel.values, k0, np.asarray(TRUE_K1), kd, squares)
        assert loss == pytest.approx(expected, rel=1e-10)

    def test_doubling_the_residual_quadruples_the_loss(self):
        layer = exact_layer()
        net = DemandNet(3, 1, hidden=(4,))
        exact = balanced_panel(length=80, with_demand=False)
        deviation = 0.05 * np.random.default_rng(7).standard_normal(exact.values.shape)
        losses = []
        for factor in (1.0, 2.0):
            values = exact.values + factor * deviation
            shifted = PressurePanel(axis=exact.axis, sensor_ids=exact.sensor_ids, values=values)
            losses.append(float(pinn_loss(net, layer, tensor_batch(shifted), mode='eval')))
        assert losses[0] > 0
        assert losses[1] == pytest.approx(4.0 * losses[0], rel=1e-9)


class TestGradients:
    @pytest.mark.parametrize('seed', range(20))
    def test_match_finite_differences(self, seed):
        panel = hidden_demand_panel(length=48, seed=seed)
        torch.manual_seed(seed)
        net = DemandNet(3, 2, hidden=(4,))
        layer = RegressionLayer(fit_ols(panel), ('u1', 'u2'), coupling_scale=0.01)
        rng = np.random.default_rng(seed)
        with torch.no_grad():
            layer.latent_weights.copy_(torch.as_tensor(rng.uniform(-1.0, 1.0, (2, 3))))
        batch = tensor_batch(panel)
        grads = gradients(net, layer, batch)

        params = {f'net.{k}': p for k, p in net.named_parameters()}
        params.update({f'regression.{k}': p for k, p in layer.named_parameters()})
        assert set(grads) == set(params)
        recorder = PreActivations(net)
        h = 1e-6
        checked = skipped = 0
        for name, p in params.items():
            flat = p.data.view(-1)
            for index in range(flat.numel()):
                original = flat[index].item()
                with torch.no_grad():
                    flat[index] = original + h
                    up = pinn_loss(net, layer, batch, mode='train').item()
                    up_signs = recorder.take()
                    flat[index] = original - h
                    down = pinn_loss(net, layer, batch, mode='train').item()
                    down_signs = recorder.take()
                    flat[index] = original
                if not same_side(up_signs, down_signs):
                    skipped += 1
                    continue
                numeric = (up - down) / (2 * h)
                analytic = grads[name].view(-1)[index].item()
                assert analytic == pytest.approx(numeric, rel=1e-4, abs=1e-9), f'{name}[{index}]'
                checked += 1
        recorder.close()
        assert checked >= 0.9 * (checked + skipped)

    def test_reference_sensor_gets_no_gradient(self):
        panel = hidden_demand_panel(length=48)
        net = DemandNet(3, 1, hidden=(4,))
        layer = RegressionLayer(fit_ols(panel), ('u1',))
        with torch.no_grad():
            layer.latent_weights.fill_(0.01)
        grads = gradients(net, layer, tensor_batch(panel))
        assert grads['regression.latent_weights'][0, 0] == 0.0
        assert set(grads) == {f'net.{k}' for k, _ in net.named_parameters()} | {'regression.latent_weights'}


class TestKfold:
    def test_contiguous_partition(self):
        blocks = kfold_blocks(23, 5)
        assert len(blocks) == 5
        np.testing.assert_array_equal(np.concatenate(blocks), np.arange(23))
        for block in blocks:
            np.testing.assert_array_equal(np.diff(block), 1)

    def test_too_short(self):
        with pytest.raises(ContractError):
            kfold_blocks(9, 5)


class TestTrain:
    def test_deterministic_for_a_seed(self):
        panel = hidden_demand_panel()
        base = fit_ols(panel)
        first = train(panel, base, TINY, seed=4)
        second = train(panel, base, TINY, seed=4)
        for key, value in first.net.state_dict().items():
            assert torch.equal(value, second.net.state_dict()[key])
        np.testing.assert_array_equal(first.coefficients.kd, second.coefficients.kd)
        assert first.fold_reports[0].validation_losses == second.fold_reports[0].validation_losses

    def test_selects_best_fold(self):
        panel = hidden_demand_panel()
        model = train(panel, fit_ols(panel), TINY, seed=1)
        assert len(model.fold_reports) == 2
        best = min(model.fold_reports, key=lambda r: r.best_validation_loss)
        assert model.selected_fold == best.fold
        assert model.coefficients.unknown_demand_ids == ('u1',)
        assert model.coefficients.kd_rows(['u1'])[0, 0] == 0.0
        for report in model.fold_reports:
            assert np.isfinite(report.train_losses).all()
            assert len(report.validation_losses) <= TINY.epochs

    def test_measured_coefficients_stay_at_ols(self):
        panel = balanced_panel(length=256, noise=0.02, seed=1)
        base = fit_ols(panel)
        model = train(panel, base, TINY, seed=0)
        coeffs = model.coefficients
        np.testing.assert_array_equal(coeffs.k1, base.k1)
        np.testing.assert_array_equal(coeffs.kd_rows(['q1']), base.kd_rows(['q1']))
        latent = coeffs.kd_rows(['u1'])
        np.testing.assert_allclose(coeffs.k0, base.k0 - model.latent_mean @ latent, rtol=0.0, atol=1e-12)
        assert coeffs.k0[coeffs.reference] == 0.0

    def test_known_demands_as_inputs(self):
        panel = balanced_panel(length=256, noise=0.02, seed=2)
        params = NetworkParams(hidden_layers=1, hidden_width=6, batch_size=64, epochs=3, patience=2,
                               folds=2, unknown_demands=1, include_known_demands=True)
        model = train(panel, fit_ols(panel), params)
        assert model.net.input_width == 4
        assert model.network_inputs(panel).shape == (panel.length, 4)
        assert estimate_demands(model, panel).shape == (1, panel.length)

    def test_rejects_latent_base(self):
        panel = hidden_demand_panel()
        base = fit_ols(panel).with_unknown_demands(['u1'], [[0.0, 0.0, 0.0]])
        with pytest.raises(ContractError):
            train(panel, base, TINY)

    def test_save_and_load(self, tmp_path):
        panel = hidden_demand_panel()
        model = train(panel, fit_ols(panel), TINY, seed=2)
        path = save_model(model, tmp_path / 'model.json', header={'seed': 2})
        loaded = load_model(path)
        assert loaded.selected_fold == model.selected_fold
        assert loaded.params == model.params
        np.testing.assert_array_equal(loaded.coefficients.k0, model.coefficients.k0)
        np.testing.assert_array_equal(loaded.latent_mean, model.latent_mean)
        np.testing.assert_array_equal(estimate_demands(loaded, panel), estimate_demands(model, panel))

    def test_older_format_rejected(self):
        panel = hidden_demand_panel()
        document = train(panel, fit_ols(panel), TINY).to_dict()
        document['version'] = 1
        with pytest.raises(ContractError):
            TrainedModel.from_dict(document)

    def test_estimates_are_non_negative(self):
        panel = hidden_demand_panel()
        model = train(panel, fit_ols(panel), TINY)
        estimates = estimate_demands(model, panel)
        assert estimates.shape == (1, panel.length)
        assert (estimates >= 0).all()

    @pytest.mark.slow
    def test_learning_beats_zero_demand_baseline(self):
        panel = hidden_demand_panel(length=1440)
        params = NetworkParams(hidden_layers=2, hidden_width=16, batch_size=96, epochs=150,
                               patience=20, folds=3, unknown_demands=1)
        model = train(panel, fit_ols(panel), params, seed=0)
        report = model.fold_reports[model.selected_fold]
        assert report.best_validation_loss < report.baseline_validation_loss


class TestDemandRecovery:
    def test_perfect_estimate(self):
        truth = np.abs(np.sin(np.linspace(0, 9, 200)))
        assert demand_recovery_r2(truth, truth) == pytest.approx(1.0)

    def test_scale_does_not_matter(self):
        truth = np.abs(np.sin(np.linspace(0, 9, 200)))
        assert demand_recovery_r2(3.7 * truth, truth) == pytest.approx(1.0)

    def test_constant_truth_is_undefined(self):
        assert np.isnan(demand_recovery_r2(np.ones(5), np.ones(5)))

    def test_match_channels_undoes_permutation(self):
        rng = np.random.default_rng(0)
        truths = np.abs(rng.standard_normal((3, 300)))
        matches = match_channels(truths[[2, 0, 1]], truths)
        assert [(e, t) for e, t, _ in matches] == [(0, 2), (1, 0), (2, 1)]
        assert all(r2 == pytest.approx(1.0) for _, _, r2 in matches)
