import numpy as np
import pytest

from jblcsm import (
    Dataset,
    IndividualSchedule,
    ModelSpec,
    PopulationParameters,
    factor_scores,
    fit,
    latent_covariance,
    mean_rate_curve,
    mean_true_scores,
    rate_curve_on_grid,
    score_matrices,
)
from jblcsm.model import growth_loadings, loading_bundle
from jblcsm.simulation import (
    MODEL_SPECS,
    SimulationCondition,
    generate_dataset,
    generate_model_faithful_dataset,
    replication_rng,
)

FULL = MODEL_SPECS["proposed_full"]
REDUCED = MODEL_SPECS["proposed_reduced"]


def params_with(sd_gamma=0.1, rho=0.3, theta_eps=1.0, reduced=False):
    sds = np.array([4.0, 1.0, 6.0, 0.0 if reduced else sd_gamma])
    corr = np.full((4, 4), rho)
    np.fill_diagonal(corr, 1.0)
    return PopulationParameters(
        mean=np.array([50.0, 2.5, -30.0, -0.7]),
        covariance=corr * np.outer(sds, sds),
        residual_variance=theta_eps,
        reduced=reduced,
    )


def zero_psi_params():
    return PopulationParameters(
        mean=np.array([50.0, 1.0, -30.0, -0.7]),
        covariance=np.zeros((4, 4)),
        residual_variance=1.0,
    )


def synthetic_result(params, spec, data):
    """FitResult at given parameters, bypassing optimization."""
    from jblcsm.estimation import (
        FitResult,
        ImproperFlags,
        fiml_loglik,
        pack_parameters,
        param_names,
    )

    theta = pack_parameters(params, spec)
    loglik = fiml_loglik(params, data, spec)
    return FitResult(
        estimates=params,
        theta=theta,
        se=np.full(theta.size, np.nan),
        param_names=param_names(spec),
        loglik=loglik,
        n_params=theta.size,
        n_obs=data.n,
        aic=np.nan,
        bic=np.nan,
        status="converged",
        improper=ImproperFlags(),
        spec=spec,
    )


class TestMeanRateCurve:
    def test_rate_at_time_zero_midpoint(self):
        params = zero_psi_params()
        s = IndividualSchedule(times=[-0.5, 0.5])
        assert mean_rate_curve(params, s, FULL)[0] == pytest.approx(22.0, rel=1e-12)

    def test_zero_eta2_gives_constant_slope(self):
        params = PopulationParameters(
            mean=np.array([50.0, 1.3, 0.0, -0.7]),
            covariance=np.zeros((4, 4)),
            residual_variance=1.0,
        )
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 5.0])
        assert np.allclose(mean_rate_curve(params, s, FULL), 1.3)

    def test_decreases_toward_asymptote_slope(self):
        params = params_with()
        s = IndividualSchedule(times=np.arange(10.0))
        rates = mean_rate_curve(params, s, FULL)
        assert np.all(np.diff(rates) < 0)
        assert np.all(rates > 2.5)
        assert rates[-1] == pytest.approx(2.5, abs=0.1)

    def test_band_on_grid(self):
        params = params_with()
        grid = np.array([0.0, 2.0, 40.0])
        mean, lo, hi = rate_curve_on_grid(params, grid, FULL)
        assert np.all(lo <= mean) and np.all(mean <= hi)
        assert mean[-1] == pytest.approx(2.5, abs=1e-6)
        # frozen quadratic form at t=0: lam = (1, mu_g, mu_e2)
        lam = np.array([1.0, -0.7, -30.0])
        psi_r = params.covariance[1:, 1:]
        half = 1.959963984540054 * np.sqrt(lam @ psi_r @ lam)
        assert hi[0] - mean[0] == pytest.approx(half, rel=1e-9)

    def test_zero_covariance_gives_zero_band(self):
        params = zero_psi_params()
        mean, lo, hi = rate_curve_on_grid(params, np.linspace(0, 9, 5), FULL)
        assert np.allclose(lo, mean)
        assert np.allclose(hi, mean)


class TestMeanTrueScores:
    def test_first_entry_is_initial_status_mean(self):
        params = params_with()
        for times in ([0.0, 1.0, 2.0], [3.0, 5.0, 8.0]):
            scores = mean_true_scores(params, IndividualSchedule(times=times), FULL)
            assert scores[0] == pytest.approx(50.0, rel=1e-12)

    def test_independent_of_covariance(self):
        a = params_with(rho=0.3)
        b = params_with(rho=0.0)
        s = IndividualSchedule(times=[0.0, 1.5, 4.0])
        assert np.allclose(
            mean_true_scores(a, s, FULL), mean_true_scores(b, s, FULL)
        )

    def test_two_wave_chain_product(self):
        # second entry = mu_eta0 + interval * mean rate at the midpoint
        params = zero_psi_params()
        s = IndividualSchedule(times=[-0.5, 0.5])
        scores = mean_true_scores(params, s, FULL)
        assert scores[1] == pytest.approx(50.0 + 1.0 * 22.0, rel=1e-12)


class TestLatentCovariance:
    def test_leading_block_is_factor_covariance(self):
        params = params_with()
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0])
        cov = latent_covariance(s, params, FULL)
        assert np.allclose(cov[:4, :4], params.covariance)

    def test_zero_factor_covariance_collapses_everything(self):
        params = zero_psi_params()
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        assert np.allclose(latent_covariance(s, params, FULL), 0.0)

    def test_true_score_block_matches_quadratic_form(self):
        params = params_with()
        s = IndividualSchedule(times=[0.0, 0.75, 1.5, 2.25])
        lam_g = growth_loadings(s, params, FULL)
        cov = latent_covariance(s, params, FULL)
        j = s.n_waves
        ly_block = cov[4 : 4 + j, 4 : 4 + j]
        assert np.allclose(ly_block, lam_g @ params.covariance @ lam_g.T)

    def test_positive_semidefinite(self):
        params = params_with()
        s = IndividualSchedule(times=np.arange(7.0))
        eigs = np.linalg.eigvalsh(latent_covariance(s, params, FULL))
        assert np.all(eigs > -1e-10)

    def test_rate_block_and_cross_block_structure(self):
        params = params_with()
        s = IndividualSchedule(times=[0.0, 1.0, 2.5])
        bundle = loading_bundle(s, params, FULL)
        cov = latent_covariance(s, params, FULL)
        j = s.n_waves
        b = np.hstack([np.zeros((j - 1, 1)), bundle.rate_loadings])
        dy_block = cov[4 + j :, 4 + j :]
        assert np.allclose(dy_block, b @ params.covariance @ b.T)
        cross = cov[4 : 4 + j, 4 + j :]
        assert np.allclose(
            cross, bundle.growth_loadings @ params.covariance @ b.T
        )

    def test_mean_rate_consistency_chain(self):
        params = params_with()
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 4.0])
        mats = score_matrices(s, params, FULL)
        dy_mean = mats.latent_mean[4 + s.n_waves :]
        assert np.allclose(
            dy_mean, mean_rate_curve(params, s, FULL), atol=1e-12
        )

    def test_lgc_has_no_score_machinery(self):
        params = params_with()
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            latent_covariance(s, params, ModelSpec("midpoint", "random", "lgc"))


class TestFactorScores:
    def _dataset_at(self, params, spec, n=25, seed=0):
        rng = np.random.default_rng(seed)
        times = np.sort(rng.uniform(0, 9, size=(n, 6)), axis=1)
        times += 1e-3 * np.arange(6)
        from jblcsm.model import batched_implied_moments

        mu, _ = batched_implied_moments(times, params, spec)
        return Dataset(y=mu, times=times)

    def test_zero_residual_returns_population_means(self):
        params = params_with()
        data = self._dataset_at(params, FULL)
        result = synthetic_result(params, FULL, data)
        for i, latent in enumerate(factor_scores(data, result)):
            assert latent.ok
            assert np.allclose(
                latent.growth_factors, [50.0, 2.5, -30.0, -0.7], atol=1e-8
            )
            assert np.allclose(latent.true_scores, data.y[i], atol=1e-8)

    def test_zero_factor_covariance_ignores_observations(self):
        params = zero_psi_params()
        data = self._dataset_at(params, FULL)
        noisy = Dataset(y=data.y + 5.0, times=data.times)
        result = synthetic_result(params, FULL, noisy)
        for latent in factor_scores(noisy, result):
            assert np.allclose(latent.growth_factors, [50.0, 1.0, -30.0, -0.7])

    def test_telescoping_identity(self):
        # ly_j - ly_{j-1} equals the rate score times the interval length
        cond = SimulationCondition("ten_equal", 200, 2.5, 1.0, 0.1, 1.0)
        rng = replication_rng(13, cond, 0)
        data, _ = generate_dataset(cond, rng)
        data = Dataset(y=data.y[:50], times=data.times[:50])
        result = fit(data, REDUCED, seed=0)
        assert result.converged
        for i, latent in enumerate(factor_scores(data, result)):
            dt = np.diff(data.times[i])
            gaps = np.diff(latent.true_scores)
            assert np.allclose(gaps, latent.rates * dt, atol=1e-10)

    def test_noiseless_recovery_of_generating_factors(self):
        # model-faithful data, near-zero residual: scores recover the drawn
        # factor values
        cond = SimulationCondition("ten_equal", 200, 2.5, 1.0, 0.0, 1e-6)
        rng = replication_rng(17, cond, 0)
        data, factors = generate_model_faithful_dataset(cond, REDUCED, rng)
        params = params_with(theta_eps=1e-6, reduced=True)
        result = synthetic_result(params, REDUCED, data)
        scored = factor_scores(data, result)
        recovered = np.array([s.growth_factors[:3] for s in scored])
        assert np.max(np.abs(recovered - factors)) < 1e-2

    def test_shrinkage_toward_the_mean(self):
        # sample variance of regression scores never exceeds the
        # corresponding factor variance under the scoring parameters
        cond = SimulationCondition("ten_equal", 200, 2.5, 1.0, 0.1, 2.0)
        rng = replication_rng(19, cond, 0)
        data, factors = generate_model_faithful_dataset(cond, FULL, rng)
        params = params_with(theta_eps=2.0)
        result = synthetic_result(params, FULL, data)
        scored = np.array([s.growth_factors for s in factor_scores(data, result)])
        for idx in range(4):
            assert scored[:, idx].var(ddof=1) <= params.covariance[idx, idx] * 1.02

    def test_reduced_gamma_score_is_the_fixed_effect(self):
        params = params_with(reduced=True)
        data = self._dataset_at(params, REDUCED)
        result = synthetic_result(params, REDUCED, data)
        for latent in factor_scores(data, result):
            assert latent.growth_factors[3] == -0.7

    def test_lgc_scoring_rejected(self):
        params = params_with()
        data = self._dataset_at(params, ModelSpec("midpoint", "random", "lgc"))
        result = synthetic_result(params, ModelSpec("midpoint", "random", "lgc"), data)
        with pytest.raises(ValueError):
            factor_scores(data, result)
