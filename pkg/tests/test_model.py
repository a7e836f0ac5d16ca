import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from kercop import bench, model
from kercop import estimators as est
from kercop import splinegrid as sg
from kercop.errors import DomainError, InvalidParameterError
from kercop.numcore import ranks_to_pseudo

ALL_METHODS = [m.value for m in est.Method]


@pytest.fixture(scope="module")
def strong_fit():
    """Default (TLL2NN) fit to Gaussian-copula data with tau = 0.7."""
    cop = bench.tau_to_param("gaussian", 0.7)
    return model.fit(ranks_to_pseudo(cop.sample(1000, seed=21)))


# ---------------------------------------------------------------------------
# fitting


class TestFit:
    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_independence_centre(self, fitted, method):
        assert 0.8 <= model.density(fitted("indep", method), np.array([0.5, 0.5])) <= 1.2

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_independence_off_centre(self, fitted, method):
        assert abs(model.density(fitted("indep", method), np.array([0.1, 0.2])) - 1) <= 0.2

    def test_bw_override(self, gauss_data):
        bw = est.BandwidthSpec(matrix_B=np.array([[0.31, 0.12], [0.12, 0.27]]))
        f = model.fit(gauss_data, "T", bw_override=bw)
        assert f.bandwidth is bw
        assert_array_equal(f.bandwidth.matrix_B, [[0.31, 0.12], [0.12, 0.27]])

    def test_override_must_match_method(self, gauss_data):
        with pytest.raises(est.InvalidBandwidthError):
            model.fit(gauss_data, "T", bw_override=est.BandwidthSpec(scalar_b=0.1))

    def test_deterministic(self, gauss_data):
        a, b = model.fit(gauss_data, "T"), model.fit(gauss_data, "T")
        assert_array_equal(a.field.values, b.field.values)
        assert a.loglik == b.loglik and a.edf == b.edf

    def test_data_outside_unit_square(self):
        x = np.random.default_rng(0).standard_normal((50, 2))
        with pytest.raises(DomainError, match="ranks_to_pseudo"):
            model.fit(x, "T")

    def test_immutable(self, fitted):
        f = fitted("gauss", "T")
        with pytest.raises(AttributeError):
            f.n = 3
        with pytest.raises(ValueError):
            f.field.values[0, 0] = 1.0

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_cdf_table(self, fitted, method):
        t = fitted("gauss", method).cdf_table
        assert np.all(np.diff(t, axis=0) >= -1e-9)
        assert np.all(np.diff(t, axis=1) >= -1e-9)
        assert abs(t[-1, -1] - 1) <= 0.02

    def test_loglik_definition(self, gauss_data, fitted):
        f = fitted("gauss", "TLL2NN")
        dens = model.density(f, gauss_data)
        assert_allclose(f.loglik, np.sum(np.log(np.maximum(dens, 1e-20))), rtol=1e-12)
        assert 1 <= f.edf <= f.n - 2

    def test_renorm_iters_recorded(self, fitted):
        f = fitted("gauss", "MR", renorm_iters=0)
        assert f.renorm_iters == 0
        assert not np.array_equal(f.field.values, fitted("gauss", "MR").field.values)

    def test_edf_grows_as_bandwidth_shrinks(self, gauss_data):
        wide = model.fit(gauss_data, "T", mult=2.0)
        narrow = model.fit(gauss_data, "T", mult=0.5)
        assert narrow.edf > wide.edf

    def test_edf_of_kde_is_smoother_trace(self):
        # oracle: trace of the KDE smoother, K_B(0) / n * sum 1 / f(Z_i)
        data = np.random.default_rng(3).random((60, 2))
        bw = est.BandwidthSpec(matrix_B=np.array([[0.5, 0.1], [0.1, 0.4]]))
        f = model.fit(data, "T", bw_override=bw)
        z = stats.norm.ppf(data)
        fz = stats.multivariate_normal(cov=bw.matrix_B @ bw.matrix_B.T)
        dens = np.array([np.mean(fz.pdf(z - zi)) for zi in z])
        ref = fz.pdf([0, 0]) / 60 * np.sum(1 / dens)
        assert_allclose(f.edf, ref, rtol=1e-10)


# ---------------------------------------------------------------------------
# density and distribution function


class TestDensity:
    def test_knot_values(self, fitted):
        f = fitted("gauss", "TLL2")
        p = f.knots.knots
        j, k = np.meshgrid(np.arange(1, 29), np.arange(1, 29), indexing="ij")
        assert_array_equal(model.density(f, np.stack([p[j], p[k]], -1)), f.field.values[j, k])

    def test_nonnegative(self, fitted):
        f = fitted("gauss", "BETA")
        g = np.linspace(0, 1, 57)
        assert np.all(model.density(f, np.stack(np.meshgrid(g, g), -1)) >= 0)

    def test_domain(self, fitted):
        with pytest.raises(DomainError):
            model.density(fitted("gauss", "T"), np.array([0.5, 1.01]))


class TestCdf:
    @pytest.mark.parametrize("method", ["MR", "T", "TLL2NN"])
    def test_boundaries(self, fitted, method):
        f = fitted("gauss", method)
        g = np.linspace(0, 1, 11)
        zeros = np.zeros_like(g)
        assert_array_equal(model.cdf(f, np.column_stack([zeros, g])), 0.0)
        assert_array_equal(model.cdf(f, np.column_stack([g, zeros])), 0.0)
        assert abs(model.cdf(f, np.array([1.0, 1.0])) - 1) <= 0.02

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_independence_centre(self, fitted, method):
        assert abs(model.cdf(fitted("indep", method), np.array([0.5, 0.5])) - 0.25) <= 0.03

    @pytest.mark.parametrize("method", ALL_METHODS)
    @pytest.mark.parametrize("data", ["indep", "gauss"])
    def test_uniform_margins(self, fitted, method, data):
        f = fitted(data, method)
        g = np.linspace(0, 1, 21)
        ones = np.ones_like(g)
        assert np.max(np.abs(model.cdf(f, np.column_stack([g, ones])) - g)) <= 0.02
        assert np.max(np.abs(model.cdf(f, np.column_stack([ones, g])) - g)) <= 0.02

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_two_increasing(self, fitted, method):
        f = fitted("gauss", method)
        rng = np.random.default_rng(1)
        a, b = np.sort(rng.random((2, 500, 2)), axis=0)
        vol = (
            model.cdf(f, b)
            - model.cdf(f, np.column_stack([a[:, 0], b[:, 1]]))
            - model.cdf(f, np.column_stack([b[:, 0], a[:, 1]]))
            + model.cdf(f, a)
        )
        assert vol.min() >= -1e-6

    def test_monotone(self, fitted):
        f = fitted("gauss", "TLL2NN")
        g = np.linspace(0, 1, 401)
        for v in (0.05, 0.5, 0.97):
            assert np.all(np.diff(model.cdf(f, np.column_stack([g, np.full_like(g, v)]))) >= -1e-9)

    def test_cdf_matches_integrated_density(self, fitted):
        # oracle: Gauss-Legendre quadrature of the (nonnegative) interpolated density
        f = fitted("gauss", "TLL2")
        x, w = np.polynomial.legendre.leggauss(60)
        u, v = 0.4, 0.7
        nu, nv = 0.5 * u * (x + 1), 0.5 * v * (x + 1)
        uu, vv = np.meshgrid(nu, nv, indexing="ij")
        ref = 0.25 * u * v * w @ model.density(f, np.stack([uu, vv], -1)) @ w
        assert_allclose(model.cdf(f, np.array([u, v])), ref, atol=2e-3)

    @pytest.mark.parametrize("method", ["T", "TLL2NN"])
    def test_u_derivative_is_slice_integral(self, fitted, method):
        # dC/du (u, v) equals the integral of the floored density along v
        f = fitted("gauss", method)
        u, eps = 0.43, 1e-5
        for v in (0.2, 0.6, 0.95):
            fd = (model.cdf(f, np.array([u + eps, v])) - model.cdf(f, np.array([u - eps, v]))) / (2 * eps)
            ref = integrate.quad(lambda t: model.density(f, np.array([u, t])), 0, v, points=f.knots.knots[f.knots.knots < v], limit=200)[0]
            assert_allclose(fd, ref, rtol=1e-4)


# ---------------------------------------------------------------------------
# conditional distribution and simulation


class TestHfunc:
    # the transformation fits follow sampling noise more closely (errors up
    # to ~0.06 at n = 2000), so the 0.03 band is applied to MR and BETA only;
    # exactness for every method is covered by the slice oracle below
    @pytest.mark.parametrize("method", ["MR", "BETA"])
    def test_independence(self, fitted, method):
        f = fitted("indep", method)
        g = np.linspace(0.1, 0.9, 9)
        uu, vv = np.meshgrid(g, np.linspace(0, 1, 11))
        assert np.max(np.abs(model.hfunc(f, vv, uu) - vv)) <= 0.03

    def test_ends_exact(self, fitted):
        f = fitted("gauss", "TLL2NN")
        u = np.linspace(0, 1, 13)
        assert_array_equal(model.hfunc(f, np.zeros_like(u), u), 0.0)
        assert_array_equal(model.hfunc(f, np.ones_like(u), u), 1.0)

    def test_round_trip(self, fitted):
        f = fitted("gauss", "TLL2NN")
        v = model.hfunc_inverse(f, 0.8, 0.3)
        assert abs(model.hfunc(f, v, 0.3) - 0.8) <= 1e-6
        vs = np.linspace(0.01, 0.99, 50)
        back = model.hfunc_inverse(f, model.hfunc(f, vs, 0.6), 0.6)
        assert np.max(np.abs(back - vs)) <= 1e-6

    def test_monotone_in_v(self, strong_fit):
        g = np.linspace(0, 1, 301)
        for u in (0.02, 0.5, 0.99):
            assert np.all(np.diff(model.hfunc(strong_fit, g, np.full_like(g, u))) >= 0)

    def test_matches_integrated_slice(self, fitted):
        f = fitted("gauss", "T")
        u, v = 0.35, 0.6
        s = np.linspace(0, 1, 20001)
        dens = model.density(f, np.column_stack([np.full_like(s, u), s]))
        cum = np.concatenate([[0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(s))])
        assert_allclose(model.hfunc(f, v, u), np.interp(v, s, cum) / cum[-1], atol=1e-4)

    def test_bad_probability(self, fitted):
        with pytest.raises(InvalidParameterError):
            model.hfunc_inverse(fitted("gauss", "T"), 1.2, 0.5)


class TestSimulate:
    def test_unit_square(self, fitted):
        x = model.simulate(fitted("gauss", "TLL2NN"), 2000, seed=1)
        assert x.shape == (2000, 2)
        assert np.all((x >= 0) & (x <= 1))

    def test_independence_tau(self, fitted):
        x = model.simulate(fitted("indep", "TLL2NN"), 10_000, seed=5)
        assert abs(model.sample_kendall_tau(x)) <= 0.03

    def test_tau_consistency(self, strong_fit):
        x = model.simulate(strong_fit, 10_000, seed=2)
        kendall = model.dep_measures(strong_fit).kendall
        assert abs(model.sample_kendall_tau(x) - kendall) <= 0.05

    @pytest.mark.parametrize("quasi", [False, True])
    def test_seeded(self, fitted, quasi):
        f = fitted("gauss", "T")
        assert_array_equal(model.simulate(f, 300, quasi=quasi, seed=9), model.simulate(f, 300, quasi=quasi, seed=9))
        assert not np.array_equal(model.simulate(f, 300, quasi=quasi, seed=9), model.simulate(f, 300, quasi=quasi, seed=10))

    def test_margins_uniform(self, strong_fit):
        x = model.simulate(strong_fit, 5000, seed=3)
        for col in x.T:
            assert stats.kstest(col, "uniform").pvalue > 1e-3

    def test_refit_stability(self, strong_fit):
        x = model.simulate(strong_fit, 10_000, seed=4)
        refit = model.fit(np.clip(x, 1e-12, 1 - 1e-12), "T")
        target = model.kendall_tau_quadrature(strong_fit)
        assert abs(model.kendall_tau_quadrature(refit) - target) <= 0.05

    def test_bad_n(self, fitted):
        with pytest.raises(InvalidParameterError):
            model.simulate(fitted("gauss", "T"), 0)


# ---------------------------------------------------------------------------
# statistics and dependence measures


class TestFitStats:
    # printed summary of a fit to a sample of 569 observations
    LOGLIK, EDF, N = 201.2196, 17.23373, 569

    def test_paper_triple(self):
        st = model.information_criteria(self.LOGLIK, self.EDF, self.N)
        assert abs(st["aic"] - (-367.97)) <= 0.01
        assert abs(st["caic"] - (-366.83)) <= 0.01
        assert abs(st["bic"] - (-293.11)) <= 0.01

    def test_formulas(self):
        st = model.information_criteria(-10.0, 4.0, 50)
        assert_allclose(st["aic"], 28.0)
        assert_allclose(st["caic"], 28.0 + 40.0 / 45.0)
        assert_allclose(st["bic"], 20.0 + math.log(50) * 4.0)

    def test_caic_undefined(self):
        with pytest.raises(InvalidParameterError):
            model.information_criteria(1.0, 9.5, 10)

    def test_fit_stats_of_model(self, fitted):
        f = fitted("gauss", "TLL2NN")
        st = model.fit_stats(f)
        assert st["loglik"] == f.loglik and st["edf"] == f.edf
        assert st["loglik"] > 0  # tau = 0.5 data: the fit beats independence


class TestDependence:
    @pytest.mark.parametrize("method", ["MR", "BETA"])
    def test_independence_nulls(self, fitted, method):
        rep = model.dep_measures(fitted("indep", method))
        for name, val in rep.as_dict().items():
            if name != "samples_used":
                assert abs(val) <= 0.05, name

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_independence_rank_measures(self, fitted, method):
        rep = model.dep_measures(fitted("indep", method))
        for val in (rep.kendall, rep.spearman, rep.blomqvist, rep.gini, rep.vd_waerden):
            assert abs(val) <= 0.05

    @pytest.mark.parametrize("method", ALL_METHODS)
    def test_invariants(self, fitted, method):
        rep = model.dep_measures(fitted("gauss", method), n_qmc=4000)
        for val in (rep.kendall, rep.spearman, rep.blomqvist, rep.gini, rep.vd_waerden, rep.linfoot):
            assert -1 <= val <= 1
        assert rep.minfo >= -0.05
        assert_allclose(rep.linfoot, math.sqrt(1 - math.exp(-2 * max(rep.minfo, 0))), rtol=1e-15)
        assert rep.samples_used == 4000

    def test_three_tau_routes(self, strong_fit):
        quad = model.kendall_tau_quadrature(strong_fit)
        qmc = model.dep_measures(strong_fit).kendall
        sim = model.sample_kendall_tau(model.simulate(strong_fit, 10_000, seed=8))
        assert abs(quad - qmc) <= 0.02
        assert abs(quad - sim) <= 0.02
        assert abs(qmc - sim) <= 0.02

    def test_quadrature_on_independence_field(self):
        knots = sg.make_knots(30)
        f = model.FittedCopula(
            est.Method.T, est.BandwidthSpec(matrix_B=np.eye(2)), sg.SplineField(knots, np.ones((30, 30))),
            n=100, loglik=0.0, edf=1.0, renorm_iters=0,
        )  # fmt: skip
        assert abs(model.kendall_tau_quadrature(f)) <= 1e-12

    def test_van_der_waerden(self):
        cop = bench.ParametricCopula(bench.Family.GAUSSIAN, 0.7)
        # direct Monte Carlo oracle on the true copula
        big = cop.sample(200_000, seed=1)
        assert abs(np.corrcoef(stats.norm.ppf(big).T)[0, 1] - 0.7) <= 0.01
        f = model.fit(ranks_to_pseudo(cop.sample(2000, seed=2)))
        assert abs(model.dep_measures(f).vd_waerden - 0.7) <= 0.07

    def test_bit_reproducible(self, fitted):
        f = fitted("gauss", "TLL1")
        assert model.dep_measures(f, n_qmc=3000, seed=4) == model.dep_measures(f, n_qmc=3000, seed=4)

    def test_tracks_truth(self, strong_fit):
        rep = model.dep_measures(strong_fit)
        cop = bench.tau_to_param("gaussian", 0.7)
        rho = cop.param
        assert abs(rep.kendall - 0.7) <= 0.05
        assert abs(rep.spearman - 6 / math.pi * math.asin(rho / 2)) <= 0.05
        assert abs(rep.blomqvist - 2 / math.pi * math.asin(rho)) <= 0.07
