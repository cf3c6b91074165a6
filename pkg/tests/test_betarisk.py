"""Beta risk measure tests.

Every closed-form route in dial.betarisk is checked against an independent
oracle: scipy special functions for cdf/quantile/digamma, adaptive quadrature
of x * pdf for the conditional value at risk, and quadrature of the integrand
f_q * ln(f_q / f_p) for the Beta KL divergence.
"""

import math

import numpy as np
import pytest
import scipy.integrate
import scipy.special
import scipy.stats

from dial.betarisk import (
    BetaParams,
    RiskLevel,
    beta_cdf,
    beta_kl,
    beta_kl_arr,
    beta_pdf,
    betainc_arr,
    cvar_arr,
    cvar_lambda,
    digamma,
    digamma_arr,
    lgamma_arr,
    log_beta_fn,
    var_arr,
    var_lambda,
)


def cvar_quadrature(a, b, lam):
    """Oracle: CVaR_lam = (1/lam) * integral_0^v x f(x; a, b) dx, v = lam-quantile."""
    import warnings
    v = scipy.stats.beta.ppf(lam, a, b)
    with warnings.catch_warnings():
        # endpoint-singular integrands (shape < 1) trip quad's roundoff
        # heuristic while still delivering the accuracy the estimate reports
        warnings.simplefilter("ignore", scipy.integrate.IntegrationWarning)
        val, err = scipy.integrate.quad(
            lambda x: x * scipy.stats.beta.pdf(x, a, b), 0.0, v,
            epsabs=1e-13, epsrel=1e-13, limit=400)
    assert err < 1e-9, f"quadrature oracle unreliable at ({a}, {b}, {lam}): err {err}"
    return val / lam


def kl_quadrature(qa, qb, pa, pb):
    """Oracle: KL(q || p) by quadrature of f_q ln(f_q / f_p)."""
    import warnings
    fq = scipy.stats.beta(qa, qb).pdf
    fp = scipy.stats.beta(pa, pb).pdf

    def integrand(x):
        d = fq(x)
        if d == 0.0:
            return 0.0
        return d * (math.log(d) - math.log(fp(x)))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.integrate.IntegrationWarning)
        val, err = scipy.integrate.quad(integrand, 0.0, 1.0, epsabs=1e-11,
                                        epsrel=1e-11, limit=400)
    assert err < 1e-7
    return val


class TestSpecialFunctions:
    def test_log_beta_small_integers(self):
        # B(2, 3) = 1!2!/4! = 1/12
        assert abs(log_beta_fn(2.0, 3.0) - math.log(1.0 / 12.0)) < 1e-12

    def test_log_beta_against_gammaln(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            a, b = rng.uniform(0.05, 50.0, size=2)
            want = scipy.special.gammaln(a) + scipy.special.gammaln(b) - scipy.special.gammaln(a + b)
            assert abs(log_beta_fn(a, b) - want) < 1e-10 * max(1.0, abs(want))

    def test_lgamma_matches_math(self):
        rng = np.random.default_rng(11)
        z = rng.uniform(0.05, 80.0, size=500)
        got = lgamma_arr(z)
        want = np.array([math.lgamma(v) for v in z])
        assert np.max(np.abs(got - want) / np.maximum(1.0, np.abs(want))) < 1e-12

    def test_log_beta_domain(self):
        with pytest.raises(ValueError):
            log_beta_fn(0.0, 1.0)
        with pytest.raises(ValueError):
            log_beta_fn(1.0, -2.0)

    def test_digamma_at_one_is_negative_euler(self):
        euler = 0.5772156649015328606
        assert abs(digamma(1.0) + euler) < 1e-12

    def test_digamma_against_scipy(self):
        rng = np.random.default_rng(3)
        x = np.concatenate([rng.uniform(1e-3, 1.0, 200),
                            rng.uniform(1.0, 30.0, 200),
                            rng.uniform(30.0, 5e3, 100)])
        got = digamma_arr(x)
        want = scipy.special.digamma(x)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_digamma_recurrence(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.uniform(0.05, 20.0)
            assert abs(digamma(x + 1.0) - digamma(x) - 1.0 / x) < 1e-11

    def test_digamma_domain(self):
        with pytest.raises(ValueError):
            digamma(0.0)
        with pytest.raises(ValueError):
            digamma(-1.5)


class TestCdf:
    def test_power_law_case(self):
        # Beta(2, 1) has cdf x^2
        assert abs(beta_cdf(0.25, BetaParams(2.0, 1.0)) - 0.0625) < 1e-12

    def test_uniform_case(self):
        p = BetaParams(1.0, 1.0)
        for x in (0.0, 0.2, 0.5, 0.77, 1.0):
            assert abs(beta_cdf(x, p) - x) < 1e-12

    def test_against_scipy_betainc(self):
        rng = np.random.default_rng(17)
        a = rng.uniform(0.1, 40.0, 600)
        b = rng.uniform(0.1, 40.0, 600)
        x = rng.uniform(0.0, 1.0, 600)
        got = betainc_arr(a, b, x)
        want = scipy.special.betainc(a, b, x)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_edges(self):
        p = BetaParams(3.3, 0.7)
        assert beta_cdf(-0.5, p) == 0.0
        assert beta_cdf(0.0, p) == 0.0
        assert beta_cdf(1.0, p) == 1.0
        assert beta_cdf(2.0, p) == 1.0

    def test_monotone_in_x(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            p = BetaParams(*rng.uniform(0.2, 20.0, 2))
            xs = np.sort(rng.uniform(0.0, 1.0, 50))
            vals = betainc_arr(p.alpha1, p.alpha2, xs)
            assert np.all(np.diff(vals) >= -1e-13)

    def test_scalar_matches_array_path(self):
        # batched lanes may run a few extra converged continued-fraction
        # iterations, so agreement is to rounding, not bitwise
        rng = np.random.default_rng(29)
        a = rng.uniform(0.2, 25.0, 40)
        b = rng.uniform(0.2, 25.0, 40)
        x = rng.uniform(0.0, 1.0, 40)
        arr = betainc_arr(a, b, x)
        for i in range(40):
            one = beta_cdf(float(x[i]), BetaParams(float(a[i]), float(b[i])))
            assert abs(one - arr[i]) < 1e-13


class TestQuantile:
    def test_uniform_identity(self):
        assert abs(var_lambda(BetaParams(1.0, 1.0), RiskLevel(0.3)) - 0.3) < 1e-10

    def test_cdf_of_quantile_is_lam(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            p = BetaParams(*rng.uniform(0.15, 30.0, 2))
            lam = rng.uniform(1e-3, 1.0)
            x = var_lambda(p, RiskLevel(lam))
            assert abs(beta_cdf(x, p) - lam) < 1e-10, (p, lam)

    def test_against_scipy_ppf(self):
        rng = np.random.default_rng(37)
        for _ in range(100):
            a, b = rng.uniform(0.3, 25.0, 2)
            lam = rng.uniform(0.01, 0.99)
            got = var_lambda(BetaParams(a, b), RiskLevel(lam))
            want = scipy.stats.beta.ppf(lam, a, b)
            assert abs(got - want) < 1e-8

    def test_lam_one_hits_upper_endpoint(self):
        assert var_lambda(BetaParams(4.0, 2.0), RiskLevel(1.0)) == 1.0

    def test_rejects_bad_risk_levels(self):
        with pytest.raises(ValueError):
            RiskLevel(0.0)
        with pytest.raises(ValueError):
            RiskLevel(-0.1)
        with pytest.raises(ValueError):
            RiskLevel(1.0 + 1e-9)
        with pytest.raises(ValueError):
            var_arr(2.0, 2.0, 0.0)

    def test_extreme_shapes_match_scipy(self):
        # shape parameters near the learned head's floor put the quantile at
        # scales like 1e-27; the inversion has to survive those during training
        from scipy import stats

        cases = [(0.0178, 1.558, 0.341), (0.01, 1.0, 0.001),
                 (0.01, 0.01, 0.5), (0.02, 40.0, 0.01),
                 (40.0, 0.02, 0.99), (300.0, 300.0, 0.5)]
        for a, b, lam in cases:
            got = float(var_arr(a, b, lam))
            ref = float(stats.beta.ppf(lam, a, b))
            assert abs(got - ref) <= 1e-9 * max(ref, 1e-300) + 1e-13, (a, b, lam)
        got = float(var_arr(0.0178, 1.558, 0.341))
        assert 1e-28 < got < 1e-26

    def test_tail_quantiles_random_vs_scipy(self):
        from scipy import stats

        rng = np.random.default_rng(71)
        for _ in range(200):
            a, b = np.exp(rng.uniform(np.log(0.01), np.log(100.0), 2))
            lam = float(rng.uniform(1e-3, 1.0))
            got = float(var_arr(a, b, lam))
            ref = float(stats.beta.ppf(lam, a, b))
            if 0.0 < ref < 1.0:
                assert abs(got - ref) <= 1e-8 * ref + 1e-12, (a, b, lam)
            else:
                # true quantile at double-precision endpoint; agree exactly
                assert got == ref, (a, b, lam)


class TestCvar:
    def test_uniform_half(self):
        # uniform tail mean below the median
        assert abs(cvar_lambda(BetaParams(1.0, 1.0), RiskLevel(0.5)) - 0.25) < 1e-10

    def test_lam_one_is_mean(self):
        p = BetaParams(2.0, 2.0)
        assert cvar_lambda(p, RiskLevel(1.0)) == p.mean
        rng = np.random.default_rng(41)
        for _ in range(50):
            p = BetaParams(*rng.uniform(0.2, 20.0, 2))
            assert abs(cvar_lambda(p, RiskLevel(1.0)) - p.mean) < 1e-14

    def test_against_quadrature_grid(self):
        shapes = [0.5, 1.0, 2.0, 5.0, 20.0]
        lams = [0.05, 0.1, 0.5, 0.9, 1.0]
        for a in shapes:
            for b in shapes:
                for lam in lams:
                    got = cvar_lambda(BetaParams(a, b), RiskLevel(lam))
                    want = cvar_quadrature(a, b, lam)
                    rel = abs(got - want) / max(abs(want), 1e-300)
                    assert rel < 1e-6, f"({a}, {b}, {lam}): {got} vs {want}"

    def test_nondecreasing_in_lam(self):
        rng = np.random.default_rng(43)
        lam_grid = np.linspace(0.01, 1.0, 40)
        for _ in range(25):
            a, b = rng.uniform(0.2, 20.0, 2)
            vals = cvar_arr(np.full_like(lam_grid, a), np.full_like(lam_grid, b), lam_grid)
            assert np.all(np.diff(vals) >= -1e-12)

    def test_cvar_below_var_and_mean(self):
        rng = np.random.default_rng(47)
        for _ in range(100):
            p = BetaParams(*rng.uniform(0.2, 20.0, 2))
            lam = rng.uniform(0.01, 0.999)
            c = cvar_lambda(p, RiskLevel(lam))
            v = var_lambda(p, RiskLevel(lam))
            assert c <= v + 1e-12
            assert c <= p.mean + 1e-12

    def test_bounds(self):
        rng = np.random.default_rng(53)
        for _ in range(100):
            p = BetaParams(*rng.uniform(0.2, 20.0, 2))
            lam = rng.uniform(1e-3, 1.0)
            c = cvar_lambda(p, RiskLevel(lam))
            assert 0.0 < c < 1.0


class TestBetaKl:
    def test_self_kl_is_zero(self):
        rng = np.random.default_rng(59)
        for _ in range(100):
            q = BetaParams(*rng.uniform(0.1, 30.0, 2))
            assert beta_kl(q, q) == 0.0

    def test_nonnegative_random_pairs(self):
        rng = np.random.default_rng(61)
        qa, qb = rng.uniform(0.1, 30.0, (2, 1000))
        pa, pb = rng.uniform(0.1, 30.0, (2, 1000))
        vals = beta_kl_arr(qa, qb, pa, pb)
        assert np.all(vals >= -1e-12)

    def test_against_quadrature(self):
        cases = [
            (2.0, 3.0, 1.0, 1.0),
            (0.5, 0.5, 2.0, 2.0),
            (5.0, 1.0, 1.0, 5.0),
            (0.3, 4.0, 0.1, 0.9),
            (7.5, 7.5, 7.0, 8.0),
        ]
        for qa, qb, pa, pb in cases:
            got = beta_kl(BetaParams(qa, qb), BetaParams(pa, pb))
            want = kl_quadrature(qa, qb, pa, pb)
            assert abs(got - want) < 1e-7 * max(1.0, abs(want)), (qa, qb, pa, pb)

    def test_kl_to_uniform_is_neg_entropy(self):
        # KL(q || Beta(1,1)) equals the negative differential entropy of q
        q = BetaParams(3.0, 2.0)
        got = beta_kl(q, BetaParams(1.0, 1.0))
        want = -scipy.stats.beta.entropy(3.0, 2.0)
        assert abs(got - want) < 1e-10


class TestParamValidation:
    def test_beta_params_reject_nonpositive(self):
        for bad in [(0.0, 1.0), (1.0, 0.0), (-1.0, 2.0), (float("nan"), 1.0),
                    (float("inf"), 1.0)]:
            with pytest.raises(ValueError):
                BetaParams(*bad)

    def test_mean(self):
        assert BetaParams(2.0, 6.0).mean == 0.25

    def test_pdf_domain(self):
        with pytest.raises(ValueError):
            beta_pdf(0.0, BetaParams(2.0, 2.0))
        with pytest.raises(ValueError):
            beta_pdf(1.0, BetaParams(2.0, 2.0))
