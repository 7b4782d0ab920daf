import numpy as np
import pytest

from jblcsm import (
    DivergentCurveError,
    GrowthFactorVector,
    IndividualSchedule,
    ModelSpec,
    PopulationParameters,
    growth_loadings,
    implied_moments,
    interval_matrix,
    jb_rate,
    jb_value,
    loading_bundle,
    midpoints,
    rate_loadings,
)

FIG1_FACTORS = GrowthFactorVector(eta0=50.0, eta1=1.0, eta2=-30.0, gamma=-0.7)

FULL = ModelSpec("midpoint", "random", "lcsm")
REDUCED = ModelSpec("midpoint", "fixed", "lcsm")
LGC_FULL = ModelSpec("midpoint", "random", "lgc")


def table2_params(reduced=False, sd_gamma=0.1, theta_eps=1.0):
    sds = np.array([4.0, 1.0, 6.0, 0.0 if reduced else sd_gamma])
    corr = np.full((4, 4), 0.3)
    np.fill_diagonal(corr, 1.0)
    cov = corr * np.outer(sds, sds)
    return PopulationParameters(
        mean=np.array([50.0, 2.5, -30.0, -0.7]),
        covariance=cov,
        residual_variance=theta_eps,
        reduced=reduced,
    )


class TestGrowthFactorVector:
    def test_requires_finite_entries(self):
        with pytest.raises(ValueError):
            GrowthFactorVector(np.nan, 1.0, -30.0, -0.7)

    def test_nonnegative_gamma_warns(self):
        with pytest.warns(UserWarning):
            GrowthFactorVector(50.0, 1.0, -30.0, 0.2)


class TestJBValue:
    def test_initial_status_at_zero(self):
        assert jb_value(FIG1_FACTORS, 0.0) == 50.0

    def test_approaches_linear_asymptote(self):
        # the asymptote is (eta0 - eta2) + eta1 t = 80 + t; the vertical
        # distance between the initial status and its intercept is eta2
        t = 40.0
        asymptote = (50.0 - (-30.0)) + 1.0 * t
        assert jb_value(FIG1_FACTORS, t) - asymptote == pytest.approx(0.0, abs=1e-9)
        assert jb_value(FIG1_FACTORS, 0.0) - 80.0 == -30.0

    def test_closed_form_oracle_value(self):
        # frozen from a 40-digit evaluation of eta0 + eta1 t + eta2 (e^{gt} - 1)
        assert jb_value(FIG1_FACTORS, 1.0) == pytest.approx(
            66.10244088625771, rel=1e-14
        )

    def test_vectorized_over_times(self):
        t = np.array([0.0, 0.5, 1.0])
        values = jb_value(FIG1_FACTORS, t)
        assert values.shape == (3,)
        assert values[0] == 50.0

    def test_overflow_guard(self):
        with pytest.warns(UserWarning):
            diverging = GrowthFactorVector(0.0, 0.0, 1.0, 1.0)
        with pytest.raises(DivergentCurveError):
            jb_value(diverging, 701.0)
        with pytest.raises(DivergentCurveError):
            jb_value(FIG1_FACTORS, 1002.0)  # |gamma t| > 700 on either side


class TestJBRate:
    def test_rate_at_zero(self):
        assert jb_rate(FIG1_FACTORS, 0.0) == pytest.approx(22.0, rel=1e-12)

    def test_rate_tends_to_asymptote_slope(self):
        assert jb_rate(FIG1_FACTORS, 50.0) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_linear_model(self):
        linear = GrowthFactorVector(50.0, 1.0, 0.0, -0.7)
        for t in (0.0, 1.0, 7.3):
            assert jb_rate(linear, t) == 1.0

    def test_matches_central_difference_of_value(self):
        h = 1e-6
        rng = np.random.default_rng(0)
        for _ in range(25):
            factors = GrowthFactorVector(
                rng.uniform(20, 80), rng.uniform(0.2, 3.0),
                rng.uniform(-60, -5), rng.uniform(-0.9, -0.3),
            )
            for t in rng.uniform(-2, 12, size=4):
                numeric = (jb_value(factors, t + h) - jb_value(factors, t - h)) / (2 * h)
                rate = jb_rate(factors, t)
                assert abs(rate - numeric) / (1 + abs(rate)) < 1e-6


class TestSchedules:
    def test_midpoints_unit_spacing(self):
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        assert np.allclose(midpoints(s), [0.5, 1.5])

    def test_midpoints_unequal_spacing(self):
        s = IndividualSchedule(times=[0.0, 0.75, 1.50])
        assert np.allclose(midpoints(s), [0.375, 1.125])

    def test_midpoint_of_skipped_wave(self):
        # a skipped wave between t=6 and t=8 is evaluated at t=7
        s = IndividualSchedule(times=[6.0, 8.0])
        assert np.allclose(midpoints(s), [7.0])

    def test_rejects_non_increasing_times(self):
        with pytest.raises(ValueError):
            IndividualSchedule(times=[0.0, 2.0, 2.0])
        with pytest.raises(ValueError):
            IndividualSchedule(times=[1.0, 0.5])

    def test_rejects_non_finite_times(self):
        with pytest.raises(ValueError):
            IndividualSchedule(times=[0.0, np.inf])


class TestIntervalMatrix:
    def test_unit_spacing(self):
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0])
        expected = np.array(
            [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=float
        )
        assert np.array_equal(interval_matrix(s), expected)

    def test_seven_wave_spacing_prefix(self):
        s = IndividualSchedule(times=[0.0, 1.5, 3.0])
        expected = np.array([[0, 0], [1.5, 0], [1.5, 1.5]])
        assert np.array_equal(interval_matrix(s), expected)

    def test_last_row_telescopes(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            times = np.sort(rng.uniform(0, 9, size=6))
            times += np.arange(6) * 1e-3  # guarantee strict increase
            s = IndividualSchedule(times=times)
            omega = interval_matrix(s)
            assert omega[-1].sum() == pytest.approx(times[-1] - times[0], rel=1e-12)


class TestRateLoadings:
    def test_row_values_against_derivative_oracle(self):
        # frozen from 40-digit evaluation of (1, g e^{g t}, m2 e^{g t}(1 + g t))
        s = IndividualSchedule(times=[0.0, 1.0])
        row = rate_loadings(s, mu_gamma=-0.7, mu_eta2=-30.0, spec=FULL)[0]
        assert row[0] == 1.0
        assert row[1] == pytest.approx(-0.4932816628030994, rel=1e-13)
        assert row[2] == pytest.approx(-13.741417749514912, rel=1e-13)

    def test_third_column_is_gamma_derivative_of_rate(self):
        # the deviation column must equal d(rate)/d(gamma) at the mean, with
        # eta2 fixed at its mean (finite-difference oracle)
        mu_gamma, mu_eta2 = -0.55, -24.0
        s = IndividualSchedule(times=[0.0, 1.3, 2.1, 4.0])
        lam = rate_loadings(s, mu_gamma, mu_eta2, FULL)
        h = 1e-6
        for row, tstar in zip(lam, midpoints(s)):
            up = GrowthFactorVector(0.0, 1.0, mu_eta2, mu_gamma + h)
            dn = GrowthFactorVector(0.0, 1.0, mu_eta2, mu_gamma - h)
            numeric = (jb_rate(up, tstar) - jb_rate(dn, tstar)) / (2 * h)
            assert row[2] == pytest.approx(numeric, rel=1e-6)

    def test_degenerate_zero_gamma(self):
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        lam = rate_loadings(s, mu_gamma=0.0, mu_eta2=-30.0, spec=FULL)
        assert np.allclose(lam[:, 0], 1.0)
        assert np.allclose(lam[:, 1], 0.0)
        assert np.allclose(lam[:, 2], -30.0)

    def test_evaluation_at_time_zero(self):
        s = IndividualSchedule(times=[-0.5, 0.5])  # midpoint lands on zero
        row = rate_loadings(s, mu_gamma=-0.7, mu_eta2=-30.0, spec=FULL)[0]
        assert np.allclose(row, [1.0, -0.7, -30.0])

    def test_reduced_drops_deviation_column(self):
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        full = rate_loadings(s, -0.7, -30.0, FULL)
        reduced = rate_loadings(s, -0.7, -30.0, REDUCED)
        assert reduced.shape == (2, 2)
        assert np.array_equal(reduced, full[:, :2])

    def test_right_endpoint_evaluation_times(self):
        s = IndividualSchedule(times=[0.0, 2.0, 6.0])
        spec = ModelSpec("right_endpoint", "random", "lcsm")
        lam = rate_loadings(s, -0.7, -30.0, spec)
        expected_col2 = -0.7 * np.exp(-0.7 * np.array([2.0, 6.0]))
        assert np.allclose(lam[:, 1], expected_col2)

    def test_taylor_first_order_error_halves_quadratically(self):
        mu_gamma, mu_eta1, mu_eta2 = -0.7, 2.5, -30.0
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0])
        lam = rate_loadings(s, mu_gamma, mu_eta2, FULL)

        def taylor_error(delta):
            worst = 0.0
            for row, tstar in zip(lam, midpoints(s)):
                exact = jb_rate(
                    GrowthFactorVector(0.0, mu_eta1, mu_eta2, mu_gamma + delta), tstar
                )
                approx = row @ np.array([mu_eta1, mu_eta2, delta])
                worst = max(worst, abs(exact - approx))
            return worst

        ratio = taylor_error(0.02) / taylor_error(0.01)
        assert 3.5 <= ratio <= 4.5


class TestGrowthLoadings:
    def test_first_column_all_ones_and_first_row_unit(self):
        params = table2_params()
        rng = np.random.default_rng(2)
        times = np.sort(rng.uniform(0, 9, size=7))
        lam = growth_loadings(IndividualSchedule(times=times), params, FULL)
        assert np.allclose(lam[:, 0], 1.0)
        assert np.allclose(lam[0], [1.0, 0.0, 0.0, 0.0])

    def test_reduced_two_wave_hand_product(self):
        # row 2 = (1, t2 - t1, mu_gamma e^{mu_gamma/2}) for unit-spaced waves
        params = table2_params(reduced=True)
        lam = growth_loadings(IndividualSchedule(times=[0.0, 1.0]), params, REDUCED)
        assert lam.shape == (2, 3)
        assert np.allclose(lam[1], [1.0, 1.0, -0.4932816628030994])

    def test_second_column_accumulates_elapsed_time(self):
        params = table2_params()
        times = np.array([0.3, 1.1, 2.9, 4.0, 7.5])
        lam = growth_loadings(IndividualSchedule(times=times), params, FULL)
        assert np.allclose(lam[:, 1], times - times[0])

    def test_matches_omega_rate_product(self):
        params = table2_params()
        s = IndividualSchedule(times=[0.0, 0.75, 1.5, 2.25])
        bundle = loading_bundle(s, params, FULL)
        recomposed = bundle.interval_matrix @ bundle.rate_loadings
        assert np.allclose(bundle.growth_loadings[:, 1:], recomposed)

    def test_lgc_rows_match_level_derivatives(self):
        params = table2_params()
        times = np.array([0.0, 1.0, 3.5])
        lam = growth_loadings(IndividualSchedule(times=times), params, LGC_FULL)
        mu_gamma, mu_eta2 = -0.7, -30.0
        h = 1e-6
        for row, t in zip(lam, times):
            assert row[0] == 1.0
            assert row[1] == t
            assert row[2] == pytest.approx(np.exp(mu_gamma * t) - 1.0, rel=1e-12)
            up = jb_value(GrowthFactorVector(0.0, 0.0, mu_eta2, mu_gamma + h), t)
            dn = jb_value(GrowthFactorVector(0.0, 0.0, mu_eta2, mu_gamma - h), t)
            assert row[3] == pytest.approx((up - dn) / (2 * h), rel=1e-6)


class TestModelSpec:
    def test_right_endpoint_requires_lcsm(self):
        with pytest.raises(ValueError):
            ModelSpec("right_endpoint", "random", "lgc")

    def test_unknown_values_rejected(self):
        with pytest.raises(ValueError):
            ModelSpec("trapezoid", "random", "lcsm")


class TestPopulationParameters:
    def test_rejects_nonpositive_residual_variance(self):
        with pytest.raises(ValueError):
            table2_params(theta_eps=0.0)

    def test_rejects_asymmetric_covariance(self):
        cov = np.eye(4)
        cov[0, 1] = 0.5
        with pytest.raises(ValueError):
            PopulationParameters(
                mean=np.zeros(4), covariance=cov, residual_variance=1.0
            )

    def test_reduced_requires_zero_gamma_block(self):
        with pytest.raises(ValueError):
            PopulationParameters(
                mean=np.zeros(4),
                covariance=np.eye(4),
                residual_variance=1.0,
                reduced=True,
            )

    def test_negative_diagonal_is_representable(self):
        cov = np.diag([16.0, 1.0, 36.0, -0.01])
        params = PopulationParameters(
            mean=np.array([50.0, 2.5, -30.0, -0.7]),
            covariance=cov,
            residual_variance=1.0,
        )
        assert params.covariance[3, 3] == -0.01


class TestImpliedMoments:
    def test_zero_psi_gives_identity_covariance(self):
        params = PopulationParameters(
            mean=np.array([50.0, 2.5, -30.0, -0.7]),
            covariance=np.zeros((4, 4)),
            residual_variance=1.0,
        )
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0])
        mom = implied_moments(s, params, FULL)
        assert np.allclose(mom.covariance, np.eye(4))

    def test_single_wave_moments(self):
        params = table2_params()
        mom = implied_moments(IndividualSchedule(times=[0.0]), params, FULL)
        assert mom.mean.shape == (1,)
        assert mom.mean[0] == 50.0
        assert mom.covariance[0, 0] == pytest.approx(16.0 + 1.0)

    def test_table2_first_diagonal_entry_and_pd(self):
        params = table2_params()
        s = IndividualSchedule(times=np.arange(10.0))
        mom = implied_moments(s, params, FULL)
        assert mom.covariance[0, 0] == pytest.approx(17.0, rel=1e-12)
        assert np.all(np.linalg.eigvalsh(mom.covariance) > 0)

    def test_matches_elementwise_quadratic_form_oracle(self):
        params = table2_params()
        s = IndividualSchedule(times=[0.0, 0.9, 2.2, 3.7, 5.0])
        lam = growth_loadings(s, params, FULL)
        mom = implied_moments(s, params, FULL)
        j = len(s.times)
        psi = params.covariance
        for a in range(j):
            assert mom.mean[a] == pytest.approx(
                sum(
                    lam[a, c] * m
                    for c, m in enumerate([50.0, 2.5, -30.0, 0.0])
                ),
                rel=1e-12,
            )
            for b in range(j):
                expected = sum(
                    lam[a, c] * psi[c, d] * lam[b, d]
                    for c in range(4)
                    for d in range(4)
                )
                if a == b:
                    expected += params.residual_variance
                assert mom.covariance[a, b] == pytest.approx(expected, rel=1e-10)

    def test_dimension_mismatch_raises(self):
        params = table2_params(reduced=True)
        s = IndividualSchedule(times=[0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            implied_moments(s, params, FULL)

    def test_moments_track_mean_perturbations(self):
        # loadings must be rebuilt from the current mu_gamma / mu_eta2
        base = table2_params()
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0])
        sigma0 = implied_moments(s, base, FULL).covariance
        for slot in (2, 3):
            mean = np.array(base.mean)
            mean[slot] *= 1.05
            moved = PopulationParameters(
                mean=mean, covariance=base.covariance,
                residual_variance=base.residual_variance,
            )
            sigma1 = implied_moments(s, moved, FULL).covariance
            assert not np.allclose(sigma0, sigma1)


class TestChangeScoreReconstruction:
    def test_midpoint_quadrature_beats_right_endpoint_per_interval(self):
        # per interval, |integral - midpoint rectangle| < |integral - right
        # endpoint rectangle| for the convex decreasing rate (gamma < 0)
        factors = GrowthFactorVector(50.0, 2.5, -30.0, -0.7)
        times = np.array([0.0, 1.0, 2.5, 4.0, 6.0, 9.0])
        for a, b in zip(times[:-1], times[1:]):
            exact = jb_value(factors, b) - jb_value(factors, a)
            mid = jb_rate(factors, 0.5 * (a + b)) * (b - a)
            right = jb_rate(factors, b) * (b - a)
            assert abs(exact - mid) < abs(exact - right)

    def test_model_implied_scores_track_exact_curve_at_mean_gamma(self):
        # an exact individual with gamma at the mean is reproduced up to the
        # midpoint-rectangle quadrature error, which stays below the
        # right-endpoint variant's error at every wave
        params = table2_params()
        factors = np.array([50.0, 2.5, -30.0, 0.0])  # deviation form
        s = IndividualSchedule(times=[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        gfv = GrowthFactorVector(50.0, 2.5, -30.0, -0.7)
        exact = jb_value(gfv, s.times)
        mid_scores = growth_loadings(s, params, FULL) @ factors
        end_spec = ModelSpec("right_endpoint", "random", "lcsm")
        end_scores = growth_loadings(s, params, end_spec) @ factors
        mid_err = np.abs(mid_scores - exact)[1:]
        end_err = np.abs(end_scores - exact)[1:]
        assert np.all(mid_err < end_err)
