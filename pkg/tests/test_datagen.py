import numpy as np
import pytest

from segcox import (
    ConfigError,
    ThetaParams,
    calibrate_baseline_hazard,
    event_probability,
    generate_cohort,
    generate_validation,
    substream,
)

from conftest import BETA, OMEGA, make_scenario


def _null_theta(tau=0.0):
    return ThetaParams(gamma=np.empty(0), beta=0.0, omega=0.0, tau=tau)


class TestEventProbability:
    def test_vanishing_hazard(self):
        theta = _null_theta()
        assert event_probability(1e-300, theta, 10.0) == pytest.approx(0.0, abs=1e-12)

    def test_covariate_free_closed_form(self):
        theta = _null_theta()
        for lam0 in (0.01, 0.0693, 0.3):
            expected = 1.0 - np.exp(-lam0 * 10.0)
            assert event_probability(lam0, theta, 10.0) == pytest.approx(expected, abs=1e-12)

    def test_monotone_in_lambda0(self):
        theta = ThetaParams(np.empty(0), BETA, OMEGA, 0.0)
        values = [event_probability(lam, theta, 10.0) for lam in (0.01, 0.05, 0.2, 1.0)]
        assert all(a < b for a, b in zip(values, values[1:]))
        assert all(0.0 < v < 1.0 for v in values)

    def test_against_plain_monte_carlo(self):
        # independent oracle: 1e7 standard-normal draws through the hazard
        sc = make_scenario()
        lam0 = calibrate_baseline_hazard(sc)
        theta = sc.theta_true
        rng = np.random.default_rng(77)
        x = rng.standard_normal(10**7)
        p = -np.expm1(-lam0 * 10.0 * np.exp(BETA * x + OMEGA * np.maximum(x, 0.0)))
        mc, se = p.mean(), p.std(ddof=1) / np.sqrt(p.size)
        quad = event_probability(lam0, theta, 10.0)
        assert abs(quad - mc) <= 3.0 * se
        assert quad == pytest.approx(0.5, abs=1e-8)


class TestCalibrateBaselineHazard:
    def test_covariate_free_closed_forms(self):
        sc = make_scenario(beta=0.0, omega=0.0, target_incidence=0.5)
        assert calibrate_baseline_hazard(sc) == pytest.approx(np.log(2.0) / 10.0, abs=1e-9)
        sc = make_scenario(beta=0.0, omega=0.0, target_incidence=0.03)
        assert calibrate_baseline_hazard(sc) == pytest.approx(-np.log(0.97) / 10.0, abs=1e-9)

    def test_residual_tolerance(self):
        sc = make_scenario(tau_quantile=0.25, rho_xw=0.6)
        lam0 = calibrate_baseline_hazard(sc)
        assert abs(event_probability(lam0, sc.theta_true, sc.t_star) - 0.5) <= 1e-10

    def test_realized_incidence_large_cohort(self):
        sc = make_scenario(n=10**6)
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 0, 0))
        assert abs(cohort.event.mean() - 0.5) <= 0.002


class TestGenerateCohort:
    def test_event_fraction_common(self):
        sc = make_scenario()
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 1, 0))
        assert abs(cohort.event.mean() - 0.5) <= 3.0 * np.sqrt(0.25 / sc.n)

    def test_event_fraction_rare(self):
        sc = make_scenario(n=50000, target_incidence=0.03, disease="rare")
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 2, 0))
        se = np.sqrt(0.03 * 0.97 / sc.n)
        assert abs(cohort.event.mean() - 0.03) <= 3.0 * se

    def test_zero_error_surrogate_is_exact(self):
        sc = make_scenario(rho_xw=1.0)
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 3, 0))
        np.testing.assert_array_equal(cohort.w, cohort.x_true)

    def test_covariate_moments_and_correlation(self):
        sc = make_scenario(n=10**6, rho_xw=0.6)
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 4, 0))
        x, w = cohort.x_true, cohort.w
        n = sc.n
        assert abs(x.mean()) <= 4.0 / np.sqrt(n)
        assert abs(x.var(ddof=1) - 1.0) <= 4.0 * np.sqrt(2.0 / n)
        rho_se = (1.0 - 0.6**2) / np.sqrt(n)
        assert abs(np.corrcoef(x, w)[0, 1] - 0.6) <= 4.0 * rho_se

    def test_seed_reproducibility(self):
        sc = make_scenario(n=500)
        lam0 = calibrate_baseline_hazard(sc)
        a = generate_cohort(sc, lam0, substream(sc.seed, 5, 0))
        b = generate_cohort(sc, lam0, substream(sc.seed, 5, 0))
        np.testing.assert_array_equal(a.event_time, b.event_time)
        np.testing.assert_array_equal(a.event, b.event)
        np.testing.assert_array_equal(a.w, b.w)

    def test_censoring_boundary(self):
        sc = make_scenario(n=2000)
        lam0 = calibrate_baseline_hazard(sc)
        cohort = generate_cohort(sc, lam0, substream(sc.seed, 6, 0))
        censored = ~cohort.event
        assert np.all(cohort.event_time[censored] == sc.t_star)
        assert np.all(cohort.event_time[cohort.event] < sc.t_star)


class TestGenerateValidation:
    def _cohort(self, sc, key=7):
        lam0 = calibrate_baseline_hazard(sc)
        return generate_cohort(sc, lam0, substream(sc.seed, key, 0))

    def test_iv_x_reveals_cohort_values(self):
        sc = make_scenario(design="IV_X")
        cohort = self._cohort(sc)
        sample = generate_validation(sc, cohort, substream(sc.seed, 7, 1))
        assert sample.m == 500
        assert len(np.unique(sample.indices)) == 500
        np.testing.assert_array_equal(sample.x_true, cohort.x_true[sample.indices])
        np.testing.assert_array_equal(sample.w, cohort.w[sample.indices])

    def test_ev_rm_shape(self):
        sc = make_scenario(design="EV_RM", method="RC1")
        cohort = self._cohort(sc)
        sample = generate_validation(sc, cohort, substream(sc.seed, 8, 1))
        assert sample.m == 500
        assert all(r.size == 2 for r in sample.w_rep)
        assert sample.indices is None

    def test_iv_rm_first_repeat_is_main_surrogate(self):
        sc = make_scenario(design="IV_RM", k_repeats=3)
        cohort = self._cohort(sc)
        sample = generate_validation(sc, cohort, substream(sc.seed, 9, 1))
        for row, idx in zip(sample.w_rep, sample.indices):
            assert row.size == 3
            assert row[0] == cohort.w[idx]

    def test_iv_rm_zero_error_repeats_identical(self):
        sc = make_scenario(design="IV_RM", rho_xw=1.0)
        cohort = self._cohort(sc)
        sample = generate_validation(sc, cohort, substream(sc.seed, 10, 1))
        for row in sample.w_rep:
            assert np.ptp(row) == 0.0


class TestScenarioConfig:
    def test_error_variance_from_correlation(self):
        # reliability-implied variances at the three study correlations
        assert make_scenario(rho_xw=0.8).sigma2_u == pytest.approx(0.5625, abs=1e-12)
        assert make_scenario(rho_xw=0.6).sigma2_u == pytest.approx(16.0 / 9.0, rel=1e-12)
        assert make_scenario(rho_xw=0.4).sigma2_u == pytest.approx(5.25, abs=1e-12)

    def test_tau_from_quantile(self):
        assert make_scenario(tau_quantile=0.5).tau == 0.0
        assert make_scenario(tau_quantile=0.9).tau == pytest.approx(1.2815515655, abs=1e-9)

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            make_scenario(rho_xw=0.0)
        with pytest.raises(ConfigError):
            make_scenario(rho_xw=1.2)
        with pytest.raises(ConfigError):
            make_scenario(target_incidence=1.0)
        with pytest.raises(ConfigError):
            make_scenario(design="EV_RM", k_repeats=1)
        with pytest.raises(ConfigError):
            make_scenario(design="IV_X", m_valid=5000)
        with pytest.raises(ConfigError):
            make_scenario(design="nope")
        with pytest.raises(ConfigError):
            make_scenario(method="RC3")

    def test_external_design_allows_m_above_n(self):
        sc = make_scenario(design="EV_X", n=300, m_valid=500)
        assert sc.m_valid == 500
