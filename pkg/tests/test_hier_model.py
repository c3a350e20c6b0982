"""
階層比較モデルと収束診断のテスト
"""
import math
import os
import sys

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hier_model import (  # noqa: E402
    BetaBinomSpec,
    Diagnostics,
    FixedHyperparameters,
    GaussianBhmSpec,
    PosteriorSamples,
    closed_form_posterior,
    closed_form_rank_prob,
    compute_diagnostics,
    fit_beta_binom,
    fit_bhm,
    fit_gaussian_bhm,
    mu_name,
    posterior_predictive_check,
)
from models import (  # noqa: E402
    HierConfig,
    InsufficientDataError,
    MethodId,
    MetricId,
    UnconvergedPosteriorError,
)

METHODS = [MethodId.MAP, MethodId.MCD, MethodId.ENSEMBLE]


@pytest.fixture(scope="module")
def observed():
    rng = np.random.default_rng(3)
    return np.array([0.30, 0.35, 0.40])[:, None] + rng.normal(scale=0.05, size=(3, 12))


@pytest.fixture(scope="module")
def fixed_fit(observed):
    fixed = FixedHyperparameters(sigma=np.full(3, 0.05), tau=0.1, mu0=0.35)
    spec = GaussianBhmSpec(observed, METHODS, list(range(1, 13)), standardize=False, fixed=fixed,
                           metric=MetricId.CRPS, n=50)
    return fit_gaussian_bhm(spec, seed=11, chains=4, iterations=2000, warmup=1000)


class TestDiagnostics:
    """R̂ と ESS のテスト"""

    def test_independent_chains_pass(self):
        rng = np.random.default_rng(0)
        diagnostics = compute_diagnostics({'x': rng.normal(size=(4, 1000))})
        assert diagnostics.max_r_hat < 1.01
        assert diagnostics.min_ess > 2000
        assert diagnostics.passed

    def test_separated_chains_fail(self):
        rng = np.random.default_rng(0)
        draws = rng.normal(size=(4, 1000)) + np.arange(4)[:, None]
        diagnostics = compute_diagnostics({'x': draws})
        assert diagnostics.max_r_hat > 1.5
        assert not diagnostics.passed

    def test_autocorrelated_chain_has_low_ess(self):
        rng = np.random.default_rng(1)
        draws = np.empty((4, 1000))
        for c in range(4):
            x = 0.0
            for t in range(1000):
                x = 0.95 * x + rng.normal()
                draws[c, t] = x
        assert compute_diagnostics({'x': draws}).min_ess < 400

    def test_constant_parameter_is_degenerate(self):
        rng = np.random.default_rng(0)
        diagnostics = compute_diagnostics({'x': rng.normal(size=(4, 100)), 'c': np.ones((4, 100))})
        assert diagnostics.degenerate == ['c']
        assert diagnostics.ess['c'] == 0.0
        assert math.isnan(diagnostics.max_r_hat)
        assert not diagnostics.passed

    def test_excluded_parameter_is_ignored(self):
        rng = np.random.default_rng(0)
        diagnostics = compute_diagnostics({'x': rng.normal(size=(4, 500)), 'c': np.ones((4, 500))},
                                          exclude=['c'])
        assert 'c' not in diagnostics.r_hat
        assert diagnostics.degenerate == []

    def test_requires_two_chains(self):
        with pytest.raises(ValueError):
            compute_diagnostics({'x': np.zeros((1, 100))})

    def test_dict_round_trip_keeps_nan(self):
        diagnostics = Diagnostics(r_hat={'a': 1.001, 'b': float('nan')}, ess={'a': 900.0, 'b': 0.0},
                                  degenerate=['b'])
        restored = Diagnostics.from_dict(diagnostics.to_dict())
        assert restored.r_hat['a'] == 1.001
        assert math.isnan(restored.r_hat['b'])
        assert restored.degenerate == ['b']


class TestClosedForm:
    """ハイパーパラメータ既知の場合の閉形式"""

    def test_shrinkage_values(self):
        posterior = closed_form_posterior([1.0, 0.0], 1.0, tau=1.0, mu0=0.0, R=10)
        np.testing.assert_allclose(posterior.shrinkage, 10 / 11)
        np.testing.assert_allclose(posterior.variance, 1 / 11)
        np.testing.assert_allclose(posterior.mean, [10 / 11, 0.0])

    def test_rank_probability_symmetry(self):
        p = closed_form_rank_prob(0.1, 0.01, 0.2, 0.02)
        q = closed_form_rank_prob(0.2, 0.02, 0.1, 0.01)
        assert p + q == pytest.approx(1.0)
        assert closed_form_rank_prob(0.0, 1.0, 0.0, 1.0) == pytest.approx(0.5)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            closed_form_posterior([0.0], 0.0, tau=1.0, mu0=0.0, R=3)

    def test_sampler_matches_closed_form(self, observed, fixed_fit):
        posterior = closed_form_posterior(observed.mean(axis=1), 0.05, tau=0.1, mu0=0.35, R=12)
        draws = fixed_fit.chains * fixed_fit.draws_per_chain
        for m, method in enumerate(METHODS):
            values = fixed_fit.mu(method)
            tolerance = 5.0 * math.sqrt(posterior.variance[m] / draws)
            assert values.mean() == pytest.approx(posterior.mean[m], abs=tolerance)
            assert values.var(ddof=1) == pytest.approx(posterior.variance[m], rel=0.10)

    def test_sampler_rank_probability_matches_closed_form(self, observed, fixed_fit):
        posterior = closed_form_posterior(observed.mean(axis=1), 0.05, tau=0.1, mu0=0.35, R=12)
        expected = closed_form_rank_prob(posterior.mean[0], posterior.variance[0],
                                         posterior.mean[1], posterior.variance[1])
        estimate = np.mean(fixed_fit.mu(METHODS[0]) < fixed_fit.mu(METHODS[1]))
        assert estimate == pytest.approx(expected, abs=0.02)

    @pytest.mark.slow
    def test_oracle_over_simulated_datasets(self):
        rng = np.random.default_rng(21)
        sigma, tau, mu0, R = 0.05, 0.1, 0.3, 10
        for dataset in range(20):
            true_mu = mu0 + tau * rng.normal(size=2)
            y = true_mu[:, None] + sigma * rng.normal(size=(2, R))
            fixed = FixedHyperparameters(sigma=np.full(2, sigma), tau=tau, mu0=mu0)
            spec = GaussianBhmSpec(y, METHODS[:2], list(range(1, R + 1)), standardize=False,
                                   fixed=fixed, metric=MetricId.CRPS, n=50)
            samples = fit_gaussian_bhm(spec, seed=100 + dataset, chains=4, iterations=3000, warmup=500)
            posterior = closed_form_posterior(y.mean(axis=1), sigma, tau=tau, mu0=mu0, R=R)
            draws = samples.chains * samples.draws_per_chain
            for m, method in enumerate(METHODS[:2]):
                standard_error = math.sqrt(posterior.variance[m] / draws)
                assert abs(samples.mu(method).mean() - posterior.mean[m]) <= 4.0 * standard_error
            expected = closed_form_rank_prob(posterior.mean[0], posterior.variance[0],
                                             posterior.mean[1], posterior.variance[1])
            estimate = np.mean(samples.mu(METHODS[0]) < samples.mu(METHODS[1]))
            assert estimate == pytest.approx(expected, abs=0.02)

    def test_fixed_parameters_excluded_from_diagnostics(self, fixed_fit):
        assert 'tau' in fixed_fit.fixed
        assert 'tau' not in fixed_fit.diagnostics.r_hat
        assert fixed_fit.converged


class TestGaussianBhm:
    """ガウス BHM のあてはめ"""

    def test_spec_requires_two_methods(self):
        with pytest.raises(InsufficientDataError):
            GaussianBhmSpec(np.zeros((1, 5)), [MethodId.MAP], list(range(5)))

    def test_spec_rejects_non_finite(self):
        y = np.ones((2, 3))
        y[0, 1] = np.nan
        with pytest.raises(ValueError):
            GaussianBhmSpec(y, METHODS[:2], [1, 2, 3])

    def test_chain_count(self, observed):
        spec = GaussianBhmSpec(observed, METHODS, list(range(1, 13)))
        with pytest.raises(ValueError):
            fit_gaussian_bhm(spec, seed=1, chains=1)

    @pytest.mark.slow
    def test_full_model_orders_methods(self, observed):
        spec = GaussianBhmSpec(observed, METHODS, list(range(1, 13)), metric=MetricId.CRPS, n=50)
        samples = fit_gaussian_bhm(spec, seed=5, chains=4, iterations=1500, warmup=750)
        means = [samples.mu(m).mean() for m in METHODS]
        np.testing.assert_array_equal(np.argsort(means), np.argsort(observed.mean(axis=1)))
        assert samples.draws['gamma[1]'].shape == (4, 750)
        assert 'sigma_gamma' in samples.draws
        # 標準化を戻した元の尺度
        assert means[0] == pytest.approx(observed[0].mean(), abs=0.05)

    @pytest.mark.slow
    def test_identical_methods_are_exchangeable(self, observed):
        y = np.vstack([observed[0], observed[0], observed[2]])
        spec = GaussianBhmSpec(y, METHODS, list(range(1, 13)), metric=MetricId.CRPS, n=50)
        samples = fit_gaussian_bhm(spec, seed=9, chains=4, iterations=2000, warmup=1000)
        estimate = np.mean(samples.mu(METHODS[0]) < samples.mu(METHODS[1]))
        assert 0.4 <= estimate <= 0.6

    def test_deterministic(self, observed):
        spec = GaussianBhmSpec(observed, METHODS, list(range(1, 13)))
        a = fit_gaussian_bhm(spec, seed=2, chains=2, iterations=200, warmup=100)
        b = fit_gaussian_bhm(spec, seed=2, chains=2, iterations=200, warmup=100)
        np.testing.assert_array_equal(a.draws[mu_name(MethodId.MAP)], b.draws[mu_name(MethodId.MAP)])

    def test_dispatch_from_table(self, metric_table):
        hier = HierConfig(chains=2, iterations=200, warmup=100)
        samples = fit_bhm(metric_table.slice_for_bhm(50, MetricId.CRPS), hier, seed=3)
        assert samples.model == "gaussian"
        assert samples.methods == METHODS
        assert samples.n == 50


class TestBetaBinomial:
    """被覆数のベータ二項モデル"""

    def test_counts_out_of_range(self):
        with pytest.raises(ValueError):
            BetaBinomSpec(np.full((2, 3), 120.0), 100, METHODS[:2], [1, 2, 3])

    @pytest.mark.slow
    def test_recovers_coverage(self):
        rng = np.random.default_rng(4)
        k = rng.binomial(200, np.array([0.80, 0.90, 0.95])[:, None], size=(3, 15)).astype(float)
        spec = BetaBinomSpec(k, 200, METHODS, list(range(1, 16)), n=100)
        samples = fit_beta_binom(spec, seed=8, chains=4, iterations=1500, warmup=750)
        assert samples.model == "betabinom"
        assert samples.n_test == 200
        assert samples.metric == MetricId.PICP
        for m, method in enumerate(METHODS):
            assert samples.mu(method).mean() == pytest.approx(k[m].mean() / 200, abs=0.03)

    @pytest.mark.slow
    def test_saturated_coverage(self):
        R = 50
        k = np.full((2, R), 100.0)
        spec = BetaBinomSpec(k, 100, METHODS[:2], list(range(1, R + 1)), n=50)
        samples = fit_beta_binom(spec, seed=6, chains=4, iterations=2000, warmup=1000)
        for method in METHODS[:2]:
            mu = samples.mu(method)
            assert mu.mean() > 0.95
            assert np.mean(mu > 0.95) >= 0.8

    @pytest.mark.slow
    def test_overdispersion_interval_covers_true_phi(self):
        rng = np.random.default_rng(10)
        phi, n_test, R = 10.0, 100, 20
        coverage = np.array([0.7, 0.8, 0.9])
        hits = 0
        for replicate in range(50):
            p = rng.beta(coverage * phi, (1.0 - coverage) * phi, size=(R, 3)).T
            k = rng.binomial(n_test, p).astype(float)
            spec = BetaBinomSpec(k, n_test, METHODS, list(range(1, R + 1)), n=100)
            samples = fit_beta_binom(spec, seed=200 + replicate, chains=4, iterations=1500, warmup=750)
            low, high = np.quantile(samples.flat('phi'), [0.025, 0.975])
            hits += int(low <= phi <= high)
        assert hits >= 40

    def test_dispatch_for_picp(self, metric_table):
        hier = HierConfig(chains=2, iterations=100, warmup=50)
        samples = fit_bhm(metric_table.slice_for_bhm(30, MetricId.PICP), hier, seed=3)
        assert samples.model == "betabinom"
        assert samples.draws['phi'].shape == (2, 50)


class TestPosteriorSamples:
    """事後サンプルの保存形式と事後予測チェック"""

    def test_frame_round_trip(self, fixed_fit):
        restored = PosteriorSamples.from_frame(fixed_fit.to_frame(), fixed_fit.metadata())
        assert restored.methods == fixed_fit.methods
        assert restored.metric == MetricId.CRPS
        assert restored.converged == fixed_fit.converged
        for name, values in fixed_fit.draws.items():
            np.testing.assert_array_equal(restored.draws[name], values)

    def test_summary_has_row_per_parameter(self, fixed_fit):
        summary = fixed_fit.summary()
        assert set(summary['parameter']) == set(fixed_fit.draws)

    def test_unconverged_rejected(self):
        rng = np.random.default_rng(0)
        draws = {mu_name(m): rng.normal(size=(4, 100)) + np.arange(4)[:, None] for m in METHODS[:2]}
        samples = PosteriorSamples("gaussian", METHODS[:2], draws, compute_diagnostics(draws))
        with pytest.raises(UnconvergedPosteriorError):
            samples.require_converged()

    def test_ppc(self, observed, fixed_fit):
        ppc = posterior_predictive_check(fixed_fit, observed, seed=1, replicates=50)
        assert ppc.replicate_values.shape == (50, 3, 12)
        assert len(ppc.replicates) == 50
        assert 0 <= ppc.band_hits <= 5
        assert 0.0 <= ppc.tail_p_value <= 1.0
        frame = ppc.to_frame()
        assert len(frame) == 51
        assert frame.iloc[0]['replicate'] == 'observed'

    def test_ppc_flags_injected_outliers(self):
        rng = np.random.default_rng(12)
        sigma, R = 0.05, 40
        clean = np.array([0.30, 0.35, 0.40])[:, None] + sigma * rng.normal(size=(3, R))
        # 5% の点を 10 SD ずらす
        contaminated = clean.copy()
        for m in range(3):
            contaminated[m, rng.choice(R, size=2, replace=False)] += 10.0 * sigma

        def plug_in_fit(y):
            fixed = FixedHyperparameters(sigma=y.std(axis=1, ddof=1), tau=0.1, mu0=float(y.mean()))
            spec = GaussianBhmSpec(y, METHODS, list(range(1, R + 1)), standardize=False,
                                   fixed=fixed, metric=MetricId.CRPS, n=50)
            return fit_gaussian_bhm(spec, seed=13, chains=4, iterations=1500, warmup=500)

        flagged = posterior_predictive_check(plug_in_fit(contaminated), contaminated, seed=2)
        assert flagged.tail_observed >= 0.03
        assert flagged.tail_flag
        assert flagged.tail_p_value < 0.05

        control = posterior_predictive_check(plug_in_fit(clean), clean, seed=2)
        assert not control.tail_flag
