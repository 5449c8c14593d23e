"""Tests for utils/evaluation.py: outcomes, metrics, variants, sweeps and Pareto fronts."""
import itertools
from datetime import timedelta

import numpy as np
import pytest

from utils.artifacts import read_json
from utils.demand_net import NetworkParams
from utils.errors import ConfigError, ContractError, ValidationError
from utils.evaluation import (
    RunOutcome, RunSettings, ScenarioData, SweepCell, classification_metrics, classify,
    compare_variants, count_outcomes, demand_recovery, fit_variant, pareto_cells, pareto_front,
    run_variant, sensitivity_sweep, summarize_ttd, uncertainty_quantification,
    write_comparison, write_detection_report, write_sweep_report, write_uq_report,
)
from utils.ingest import to_utc
from utils.synth import generate, reference_scenario

LEAK = to_utc('2019-02-10T13:05:00Z')
HEADER = {'config_digest': 'abc', 'seed': 0}


def scenario(leak='abrupt', noise_sigma=0.01, seed=0):
    spec = reference_scenario(weeks=4, leak=leak, noise_sigma=noise_sigma, seed=seed)
    return ScenarioData.from_truth(generate(spec), spec)


@pytest.fixture(scope='module')
def abrupt():
    return scenario()


@pytest.fixture(scope='module')
def fk_run(abrupt):
    return run_variant('FK', abrupt)


@pytest.fixture(scope='module')
def base_run(abrupt):
    return run_variant('BASE', abrupt)


def dominated(a, b):
    return b[0] <= a[0] and b[1] >= a[1] and (b[0] < a[0] or b[1] > a[1])


class TestClassify:
    def test_alarm_after_leak(self):
        assert classify(LEAK + timedelta(hours=21), LEAK) == ('TP', timedelta(hours=21))

    def test_alarm_at_leak_start(self):
        assert classify(LEAK, LEAK) == ('TP', timedelta(0))

    def test_early_alarm(self):
        assert classify(LEAK - timedelta(minutes=5), LEAK) == ('FP', None)

    def test_missed_leak(self):
        assert classify(None, LEAK) == ('FN', None)

    def test_leak_free(self):
        assert classify(None, None) == ('CLEAN', None)
        assert classify(LEAK, None) == ('FP', None)


class TestRunOutcome:
    def test_ttd_only_for_tp(self):
        with pytest.raises(ValueError):
            RunOutcome(variant='PINN', seed=0, classification='FP', ttd=timedelta(hours=1))
        with pytest.raises(ValueError):
            RunOutcome(variant='PINN', seed=0, classification='TP')

    def test_negative_ttd(self):
        with pytest.raises(ValueError):
            RunOutcome(variant='PINN', seed=0, classification='TP', ttd=timedelta(hours=-1))

    def test_counts_partition(self):
        outcomes = [
            RunOutcome('BASE', 0, 'TP', timedelta(hours=2)),
            RunOutcome('BASE', 1, 'FP'),
            RunOutcome('BASE', 2, 'FN'),
            RunOutcome('BASE', 3, 'TP', timedelta(hours=4)),
        ]
        counts = count_outcomes(outcomes)
        assert counts == {'TP': 2, 'FP': 1, 'FN': 1, 'CLEAN': 0}
        assert sum(counts.values()) == len(outcomes)


class TestMetrics:
    def test_reference_counts(self):
        m = classification_metrics(92, 7, 1)
        assert (m.precision, m.recall, m.f1) == pytest.approx((0.9293, 0.9892, 0.9583), abs=5e-5)
        m = classification_metrics(96, 3, 1)
        assert (m.precision, m.recall, m.f1) == pytest.approx((0.9697, 0.9897, 0.9796), abs=5e-5)

    def test_perfect(self):
        m = classification_metrics(7, 0, 0)
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)

    def test_undefined(self):
        m = classification_metrics(0, 0, 0)
        assert (m.precision, m.recall, m.f1) == (None, None, None)
        assert classification_metrics(0, 0, 4).precision is None

    def test_f1_is_harmonic_mean(self):
        for tp, fp, fn in itertools.product(range(1, 6), range(0, 4), range(0, 4)):
            m = classification_metrics(tp, fp, fn)
            harmonic = 2 * m.precision * m.recall / (m.precision + m.recall)
            assert abs(m.f1 - harmonic) <= 1e-12

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            classification_metrics(-1, 0, 0)


class TestTtdSummary:
    def test_quartiles(self):
        summary = summarize_ttd([timedelta(hours=h) for h in (1, 2, 3, 4, 5)])
        assert summary.count == 5
        assert summary.median == timedelta(hours=3)
        assert summary.q1 == timedelta(hours=2)
        assert summary.mean == timedelta(hours=3)
        assert summary.to_dict('hours')['maximum'] == 5.0

    def test_empty(self):
        assert summarize_ttd([]) is None


class TestParetoFront:
    def test_equal_f1_with_slower_ttd_is_dominated(self):
        points = [(23.0, 0.990), (22.0, 0.985), (22.1, 0.985), (21.8, 0.974), (21.7, 0.969)]
        assert pareto_front(points) == [True, True, False, True, True]

    def test_incipient_grid_keeps_two_leading_rows(self):
        points = [(25.2, 0.995), (15.4, 0.990), (22.3, 0.985), (28.3, 0.980)]
        assert pareto_front(points) == [True, True, False, False]

    def test_fastest_cell_dominates_everything_below_its_f1(self):
        points = [(15.4, 0.990), (22.3, 0.985), (28.3, 0.980), (15.4, 0.970)]
        assert pareto_front(points) == [True, False, False, False]

    def test_single_point(self):
        assert pareto_front([(5.0, 0.5)]) == [True]

    def test_duplicates_are_both_optimal(self):
        assert pareto_front([(1.0, 0.9), (1.0, 0.9), (2.0, 0.8)]) == [True, True, False]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            points = [(float(a), float(b)) for a, b in rng.integers(0, 6, size=(12, 2))]
            expected = [not any(dominated(p, q) for q in points) for p in points]
            assert pareto_front(points) == expected

    def test_stable_under_permutation(self):
        points = [(23.0, 0.990), (22.0, 0.985), (22.1, 0.985), (21.8, 0.974), (21.7, 0.969)]
        order = [3, 0, 4, 2, 1]
        flags = pareto_front([points[i] for i in order])
        assert flags == [pareto_front(points)[i] for i in order]

    def test_cells_without_ttd_are_never_optimal(self):
        cells = [
            SweepCell(delta=0.0, epsilon=200.0, avg_ttd=None, f1=0.0, tp=0, fp=0, fn=3),
            SweepCell(delta=0.0, epsilon=225.0, avg_ttd=timedelta(hours=3), f1=0.8, tp=2, fp=0, fn=1),
        ]
        assert pareto_cells(cells) == [False, True]


class TestScenarioData:
    def test_windows_from_truth(self, abrupt):
        assert abrupt.training_length() == 4032
        assert abrupt.leak_start == to_utc('2019-01-15T13:05:00Z')
        assert abrupt.truth_ids == ('ind1', 'ind2', 'ind3')
        assert abrupt.analysis_panel().length == abrupt.panel.length

    def test_leak_inside_training_rejected(self, abrupt):
        with pytest.raises(ValidationError):
            ScenarioData(panel=abrupt.panel, training_start=abrupt.training_start,
                         training_end=abrupt.training_end,
                         leak_start=abrupt.training_end - timedelta(hours=1))

    def test_windows_out_of_order(self, abrupt):
        with pytest.raises(ValidationError):
            ScenarioData(panel=abrupt.panel, training_start=abrupt.training_end,
                         training_end=abrupt.training_start)

    def test_fk_needs_truth(self, abrupt):
        bare = ScenarioData(panel=abrupt.panel, training_start=abrupt.training_start,
                            training_end=abrupt.training_end, leak_start=abrupt.leak_start)
        with pytest.raises(ContractError):
            fit_variant('FK', bare)

    def test_unknown_variant(self, abrupt):
        with pytest.raises(ConfigError):
            fit_variant('LSTM', abrupt)


class TestRunVariant:
    @pytest.mark.parametrize('seed', [0, 1, 2])
    def test_closure_without_noise(self, seed):
        data = scenario(leak=None, noise_sigma=0.0, seed=seed)
        run = run_variant('FK', data, seed=seed)
        assert np.abs(run.mre.full).max() <= 1e-9
        assert run.outcome.classification == 'CLEAN'
        assert run.detection.alarms == []

    def test_full_knowledge_detects_abrupt_leak(self, fk_run, abrupt):
        outcome = fk_run.outcome
        assert outcome.classification == 'TP'
        assert outcome.alarm.timestamp >= abrupt.leak_start
        assert outcome.ttd < timedelta(hours=6)

    def test_detection_window_follows_training(self, fk_run, abrupt):
        assert fk_run.detection.axis.start == abrupt.training_end
        assert fk_run.mre.reduced.shape[0] == 3

    def test_base_has_larger_residual(self, fk_run, base_run, abrupt):
        n = abrupt.training_length()
        assert base_run.stds.min() > fk_run.stds.max()
        assert base_run.coefficients.demand_ids == ()
        assert base_run.mre.reduced[:, :n].shape == (3, n)

    def test_stored_model_reproduces_run(self, abrupt, base_run):
        fitted = fit_variant('BASE', abrupt)
        again = run_variant('BASE', abrupt, fitted=fitted)
        assert again.outcome == base_run.outcome

    def test_mean_mode_monitors_one_series(self, abrupt):
        run = run_variant('FK', abrupt, RunSettings(mode='mean'))
        assert run.mre.series_ids == ['mean']
        assert len(run.detection.traces) == 1

    def test_bare_coefficients_cannot_drive_pinn(self, abrupt):
        with pytest.raises(ContractError):
            run_variant('PINN', abrupt, fitted=fit_variant('BASE', abrupt))

    def test_no_demand_recovery_without_network(self, fk_run, abrupt):
        assert demand_recovery(fk_run, abrupt) == []


class TestSweep:
    def test_cell_reproduces_standalone_detection(self, fk_run):
        cells = sensitivity_sweep([fk_run], [0.5, 1.0], [100.0, 300.0])
        cell = next(c for c in cells if c.delta == 1.0 and c.epsilon == 300.0)
        assert (cell.tp, cell.fp, cell.fn) == (1, 0, 0)
        assert cell.avg_ttd == fk_run.outcome.ttd

    def test_grid_shape(self, fk_run, base_run):
        deltas = [0.25 * k for k in range(9)]
        epsilons = [200.0 + 25.0 * k for k in range(9)]
        cells = sensitivity_sweep([fk_run, base_run], deltas, epsilons)
        assert len(cells) == 81
        assert all(c.tp + c.fp + c.fn == 2 for c in cells)
        assert (cells[0].delta, cells[0].epsilon) == (0.0, 200.0)
        assert (cells[1].delta, cells[1].epsilon) == (0.0, 225.0)

    def test_ttd_grows_with_threshold(self, fk_run):
        cells = sensitivity_sweep([fk_run], [1.0], [50.0, 100.0, 200.0, 300.0, 400.0])
        ttds = [c.avg_ttd for c in cells]
        assert all(t is not None for t in ttds)
        assert ttds == sorted(ttds)

    def test_single_cell_is_pareto_optimal(self, fk_run):
        cells = sensitivity_sweep([fk_run], [1.0], [300.0])
        assert pareto_cells(cells) == [True]

    def test_empty_grid(self, fk_run):
        with pytest.raises(ConfigError):
            sensitivity_sweep([fk_run], [], [300.0])

    def test_negative_slack(self, fk_run):
        with pytest.raises(ConfigError):
            sensitivity_sweep([fk_run], [-1.0], [300.0])


class TestUncertaintyQuantification:
    def test_counts_cover_every_run(self, abrupt):
        result = uncertainty_quantification(abrupt, RunSettings(), seeds=[0, 1, 2], variant='FK')
        assert sum(result.counts.values()) == 3
        assert result.counts['TP'] == 3
        assert result.metrics.f1 == 1.0
        assert result.ttd.count == 3

    def test_seeds_must_be_distinct(self, abrupt):
        with pytest.raises(ConfigError):
            uncertainty_quantification(abrupt, RunSettings(), seeds=[1, 1], variant='BASE')

    def test_compare_variants_skips_fk_without_truth(self, abrupt):
        bare = ScenarioData(panel=abrupt.panel, training_start=abrupt.training_start,
                            training_end=abrupt.training_end, leak_start=abrupt.leak_start)
        rows = compare_variants([(bare, 0)], RunSettings(), variants=('BASE', 'FK'))
        assert [r.variant for r in rows] == ['BASE']

    @pytest.mark.slow
    def test_pinn_end_to_end(self, abrupt):
        network = NetworkParams(hidden_layers=1, hidden_width=8, epochs=10, patience=5, folds=2)
        run = run_variant('PINN', abrupt, RunSettings(network=network), seed=0)
        assert run.outcome.classification in ('TP', 'FP', 'FN')
        matches = demand_recovery(run, abrupt)
        assert len(matches) == network.unknown_demands
        assert {m[0] for m in matches} == {'u1', 'u2'}


@pytest.mark.slow
class TestReferenceDistrict:
    """Default settings on the canned district, ten scenario seeds per check."""

    def test_pinn_recovers_a_demand_channel(self):
        passed = 0
        for seed in range(10):
            data = scenario(leak=None, seed=seed)
            run = run_variant('PINN', data, seed=seed)
            passed += max(r2 for _, _, r2 in demand_recovery(run, data)) >= 0.8
        assert passed >= 8

    def test_abrupt_leak_pinn_beats_base(self):
        cases = [(scenario(seed=seed), seed) for seed in range(10)]
        rows = {r.variant: r for r in compare_variants(cases, RunSettings(), jobs=4)}
        assert rows['PINN'].median_ttd < rows['BASE'].median_ttd
        assert rows['PINN'].median_ttd <= 2 * rows['FK'].median_ttd

    def test_incipient_leak_ordering(self):
        cases = [(scenario(leak='incipient', seed=seed), seed) for seed in range(10)]
        rows = {r.variant: r for r in compare_variants(cases, RunSettings(), jobs=4)}
        assert rows['FK'].median_ttd <= rows['PINN'].median_ttd <= rows['BASE'].median_ttd

    def test_twenty_run_uncertainty(self, abrupt):
        result = uncertainty_quantification(abrupt, RunSettings(), seeds=range(20), variant='PINN', jobs=4)
        assert sum(result.counts.values()) == 20
        assert result.metrics.f1 >= 0.9


class TestReports:
    def test_detection_report(self, tmp_path, fk_run):
        paths = write_detection_report(tmp_path, fk_run, HEADER)
        assert all(p.exists() for p in paths.values())
        report = read_json(paths['report'])
        assert report['provenance'] == HEADER
        assert report['classification'] == 'TP'
        assert report['detection']['delta'] == 1.0
        assert report['detection']['epsilon'] == 300.0
        lines = paths['trace'].read_text().splitlines()
        assert lines[0].startswith('# ')
        assert len(lines) == len(HEADER) + 1 + 3 * fk_run.detection.axis.length

    def test_uq_and_comparison_reports(self, tmp_path, fk_run, base_run, abrupt):
        result = uncertainty_quantification(abrupt, RunSettings(), seeds=[0], variant='FK')
        paths = write_uq_report(tmp_path, result, HEADER)
        assert read_json(paths['summary'])['counts']['TP'] == 1
        rows = compare_variants([(abrupt, 0)], RunSettings(), variants=('BASE', 'FK'))
        written = write_comparison(tmp_path, rows, HEADER)
        document = read_json(written['json'])
        assert [r['variant'] for r in document['rows']] == ['BASE', 'FK']

    def test_sweep_report(self, tmp_path, fk_run):
        cells = sensitivity_sweep([fk_run], [0.5, 1.0], [200.0, 300.0])
        paths = write_sweep_report(tmp_path, cells, HEADER)
        assert (tmp_path / 'sweep.csv').exists()
        assert (tmp_path / 'pareto.csv').exists()
        assert all(p.exists() for p in paths.values())
