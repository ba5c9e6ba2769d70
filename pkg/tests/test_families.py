"""Family log-densities, derivatives, simulation, and residuals."""

import numpy as np
import pytest
from scipy import stats

from rrglmm import (
    Link,
    canonical_link,
    deviance_residual,
    get_family,
    log_density,
    neg_loglik_derivs,
    quantile_residual,
    simulate_response,
)

POISSON = get_family("poisson")
GAUSSIAN = get_family("gaussian")
BERNOULLI = get_family("bernoulli")
LOG, IDENT, LOGIT = Link("log"), Link("identity"), Link("logit")


class TestLogDensity:
    def test_poisson_at_unit_mean(self):
        # -mu + y log mu - log y! with mu = 1, y = 0
        assert log_density(POISSON, LOG, 0, 0.0) == pytest.approx(-1.0, abs=1e-12)

    def test_gaussian_standard(self):
        assert log_density(GAUSSIAN, IDENT, 0.0, 0.0, 1.0) == pytest.approx(
            -0.9189385332046727, abs=1e-9
        )

    def test_bernoulli_symmetric(self):
        assert log_density(BERNOULLI, LOGIT, 1.0, 0.0) == pytest.approx(
            np.log(0.5), abs=1e-12
        )

    def test_support_errors(self):
        with pytest.raises(ValueError):
            log_density(POISSON, LOG, -1.0, 0.0)
        with pytest.raises(ValueError):
            log_density(POISSON, LOG, 1.5, 0.0)
        with pytest.raises(ValueError):
            log_density(BERNOULLI, LOGIT, 2.0, 0.0)

    def test_non_canonical_pair_rejected(self):
        with pytest.raises(ValueError):
            log_density(POISSON, IDENT, 1.0, 0.5)

    def test_maximized_at_eta_equal_link_of_y(self):
        # for interior y the conditional log-density peaks at eta = g(y)
        cases = [
            (POISSON, LOG, 3.0),
            (GAUSSIAN, IDENT, -0.7),
            (POISSON, LOG, 1.0),
        ]
        for fam, link, y in cases:
            eta_star = link(y)
            best = log_density(fam, link, y, eta_star)
            for delta in (-0.3, -0.01, 0.01, 0.3):
                assert log_density(fam, link, y, eta_star + delta) < best


class TestDerivatives:
    def test_poisson_point(self):
        d1, d2 = neg_loglik_derivs(POISSON, LOG, 0.0, 0.0)
        assert (d1, d2) == (1.0, 1.0)

    def test_gaussian_point(self):
        d1, d2 = neg_loglik_derivs(GAUSSIAN, IDENT, 2.0, 0.0, 1.0)
        assert (d1, d2) == (-2.0, 1.0)

    def test_bernoulli_point(self):
        d1, d2 = neg_loglik_derivs(BERNOULLI, LOGIT, 0.0, 0.0)
        assert (d1, d2) == (0.5, 0.25)

    @pytest.mark.parametrize(
        "family,link,ys",
        [
            (POISSON, LOG, [0.0, 1.0, 2.0, 5.0, 11.0]),
            (GAUSSIAN, IDENT, [-2.0, -0.5, 0.0, 1.3, 4.0]),
            (BERNOULLI, LOGIT, [0.0, 1.0]),
        ],
    )
    def test_matches_finite_differences_on_grid(self, family, link, ys):
        # 100 (y, eta) points per family; central differences of the
        # log-density reproduce d1 (negated) and d2
        etas = np.linspace(-2.0, 2.0, 20 if len(ys) == 5 else 50)
        h1, h2 = 1e-6, 1e-4  # separate steps: 2nd differences need a larger one
        for y in ys:
            for eta in etas:
                d1, d2 = neg_loglik_derivs(family, link, y, eta)
                fd1 = -(
                    log_density(family, link, y, eta + h1)
                    - log_density(family, link, y, eta - h1)
                ) / (2 * h1)
                fd2 = -(
                    log_density(family, link, y, eta + h2)
                    - 2 * log_density(family, link, y, eta)
                    + log_density(family, link, y, eta - h2)
                ) / h2**2
                assert fd1 == pytest.approx(d1, rel=1e-6, abs=1e-8)
                assert fd2 == pytest.approx(d2, rel=1e-4, abs=1e-6)

    def test_d2_is_variance_function_over_phi(self):
        _, d2 = neg_loglik_derivs(GAUSSIAN, IDENT, 0.0, 1.0, 4.0)
        assert d2 == pytest.approx(0.25)
        _, d2 = neg_loglik_derivs(POISSON, LOG, 2.0, 1.1)
        assert d2 == pytest.approx(np.exp(1.1))


class TestSimulation:
    def test_poisson_law_of_large_numbers(self):
        rng = np.random.default_rng(101)
        draws = simulate_response(POISSON, LOG, np.full(100_000, np.log(4.0)), 1.0, rng)
        assert np.mean(draws) == pytest.approx(4.0, abs=0.1)

    def test_gaussian_variance(self):
        rng = np.random.default_rng(102)
        draws = simulate_response(GAUSSIAN, IDENT, np.zeros(100_000), 1.0, rng)
        assert np.var(draws) == pytest.approx(1.0, abs=0.05)

    def test_bernoulli_saturation(self):
        rng = np.random.default_rng(103)
        assert simulate_response(BERNOULLI, LOGIT, 30.0, 1.0, rng) == 1.0


class TestQuantileResidual:
    def test_poisson_zero_count_window(self):
        # w uniform on (0, e^-2]: the residual never exceeds Phi^-1(e^-2)
        rng = np.random.default_rng(7)
        r = quantile_residual(POISSON, np.zeros(2000), np.full(2000, 2.0), 1.0, rng)
        assert np.max(r) <= stats.norm.ppf(np.exp(-2.0)) + 1e-12
        assert np.min(r) > stats.norm.ppf(1e-10) - 1e-9

    def test_gaussian_center(self):
        assert quantile_residual(GAUSSIAN, 1.3, 1.3, 2.0) == pytest.approx(0.0, abs=1e-12)

    def test_normality_under_true_model(self):
        # simulate -> residual pipeline is standard normal (KS, n = 1e4)
        rng = np.random.default_rng(2024)
        n = 10_000
        eta = rng.normal(0.5, 0.7, n)
        y = simulate_response(POISSON, LOG, eta, 1.0, rng)
        r = quantile_residual(POISSON, y, np.exp(eta), 1.0, rng)
        ks = stats.kstest(r, "norm")
        crit_1pct = 1.63 / np.sqrt(n)
        assert ks.statistic < crit_1pct
        assert ks.pvalue > 0.01

    def test_bernoulli_windows(self):
        rng = np.random.default_rng(9)
        r1 = quantile_residual(BERNOULLI, np.ones(500), np.full(500, 0.25), 1.0, rng)
        # y = 1: w uniform on (0.75, 1]
        assert np.min(r1) >= stats.norm.ppf(0.75) - 1e-12


class TestDevianceResidual:
    def test_gaussian_zero_at_mean(self):
        assert deviance_residual(GAUSSIAN, 1.0, 1.0) == 0.0

    def test_gaussian_scaled(self):
        assert deviance_residual(GAUSSIAN, 2.0, 0.0, 1.0) == pytest.approx(2.0)
        assert deviance_residual(GAUSSIAN, 2.0, 0.0, 4.0) == pytest.approx(1.0)

    def test_poisson_zero_count_limit(self):
        assert deviance_residual(POISSON, 0.0, 1.0) == pytest.approx(-np.sqrt(2.0))

    def test_sign_convention(self):
        assert deviance_residual(POISSON, 5.0, 2.0) > 0
        assert deviance_residual(BERNOULLI, 0.0, 0.7) < 0


def test_canonical_links():
    assert canonical_link(POISSON).kind == "log"
    assert canonical_link(GAUSSIAN).kind == "identity"
    assert canonical_link(BERNOULLI).kind == "logit"
    assert POISSON.dispersion_fixed and BERNOULLI.dispersion_fixed
    assert not GAUSSIAN.dispersion_fixed
