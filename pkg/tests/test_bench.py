import io
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, stats

from kercop import bench
from kercop import estimators as est
from kercop.bench import Family, ParametricCopula
from kercop.errors import InvalidParameterError, KercopError

FAMILIES_AT_HALF = [
    ("gaussian", 0.5),
    ("student_t", 0.5),
    ("gumbel", 0.5),
    ("clayton", 0.5),
    ("frank", 0.5),
    ("independence", 0.0),
]


def copula(family, tau):
    return bench.tau_to_param(family, tau)


class TestParametric:
    @pytest.mark.parametrize("family,tau", FAMILIES_AT_HALF)
    def test_density_integrates_to_one(self, family, tau):
        c = copula(family, tau)
        # tensor Gauss-Legendre on the normal-score scale absorbs the corner
        # singularities of the tail-dependent families
        x, w = np.polynomial.legendre.leggauss(200)
        z = 6.0 * x
        u = stats.norm.cdf(z)
        jac = 6.0 * w * stats.norm.pdf(z)
        uu, vv = np.meshgrid(u, u, indexing="ij")
        vals = c.pdf(np.stack([uu, vv], -1))
        assert_allclose(jac @ vals @ jac, 1.0, atol=1e-6)

    @pytest.mark.parametrize("family,tau", FAMILIES_AT_HALF)
    def test_uniform_margins_of_cdf(self, family, tau):
        c = copula(family, tau)
        g = np.linspace(0, 1, 21)
        ones = np.ones_like(g)
        assert np.max(np.abs(c.cdf(np.column_stack([g, ones])) - g)) <= 1e-9
        assert np.max(np.abs(c.cdf(np.column_stack([ones, g])) - g)) <= 1e-9
        assert np.all(c.cdf(np.column_stack([g, np.zeros_like(g)])) == 0.0)

    def test_clayton_closed_form(self):
        # theta = 2: C(1/2, 1/2) = (4 + 4 - 1)^(-1/2)
        c = ParametricCopula("clayton", 2.0)
        assert_allclose(c.cdf(np.array([0.5, 0.5])), 7**-0.5, rtol=1e-14)

    def test_gaussian_cdf_known_value(self):
        # orthant probability: C(1/2, 1/2) = 1/4 + asin(rho) / (2 pi)
        c = ParametricCopula("gaussian", 0.6)
        assert_allclose(c.cdf(np.array([0.5, 0.5])), 0.25 + math.asin(0.6) / (2 * math.pi), atol=1e-8)

    def test_gumbel_pdf_matches_cdf_derivative(self):
        c = copula("gumbel", 0.4)
        u, v, h = 0.3, 0.65, 1e-4
        mixed = (
            c.cdf(np.array([u + h, v + h])) - c.cdf(np.array([u + h, v - h]))
            - c.cdf(np.array([u - h, v + h])) + c.cdf(np.array([u - h, v - h]))
        ) / (4 * h * h)
        assert_allclose(c.pdf(np.array([u, v])), mixed, rtol=1e-5)

    @pytest.mark.parametrize("family", ["frank", "clayton"])
    def test_pdf_matches_cdf_derivative(self, family):
        c = copula(family, 0.6)
        u, v, h = 0.42, 0.2, 1e-4
        mixed = (
            c.cdf(np.array([u + h, v + h])) - c.cdf(np.array([u + h, v - h]))
            - c.cdf(np.array([u - h, v + h])) + c.cdf(np.array([u - h, v - h]))
        ) / (4 * h * h)
        assert_allclose(c.pdf(np.array([u, v])), mixed, rtol=1e-5)

    def test_pdf_zero_on_boundary(self):
        c = copula("clayton", 0.7)
        assert np.all(c.pdf(np.array([[0.0, 0.3], [0.3, 1.0]])) == 0.0)

    @pytest.mark.parametrize("family", ["gaussian", "student_t", "gumbel", "clayton", "frank"])
    @pytest.mark.parametrize("tau", [0.3, 0.7])
    def test_sampler_tau(self, family, tau):
        x = copula(family, tau).sample(3000, seed=5)
        assert x.shape == (3000, 2)
        assert np.all((x > 0) & (x < 1))
        # sd of the sample tau is below 0.015 here
        assert abs(stats.kendalltau(x[:, 0], x[:, 1])[0] - tau) <= 0.04

    @pytest.mark.parametrize("family", ["gaussian", "gumbel", "clayton", "frank"])
    def test_sampler_uniform_margins(self, family):
        x = copula(family, 0.5).sample(4000, seed=9)
        for col in x.T:
            assert stats.kstest(col, "uniform").pvalue > 1e-3

    def test_sampler_seeded(self):
        c = copula("gumbel", 0.5)
        assert np.array_equal(c.sample(50, seed=3), c.sample(50, seed=3))
        assert not np.array_equal(c.sample(50, seed=3), c.sample(50, seed=4))


class TestTauToParam:
    @pytest.mark.parametrize("family,tau,param", [
        ("gaussian", 0.5, math.sin(math.pi / 4)),
        ("gumbel", 0.5, 2.0),
        ("clayton", 0.5, 2.0),
        ("student_t", -0.3, math.sin(-0.15 * math.pi)),
    ])
    def test_closed_forms(self, family, tau, param):
        assert_allclose(bench.tau_to_param(family, tau).param, param, rtol=1e-14)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
    def test_frank_round_trip(self, tau):
        c = bench.tau_to_param("frank", tau)
        # independent oracle: Kendall's tau as 4 E[C] - 1 by quadrature
        val = integrate.dblquad(lambda v, u: c.cdf(np.array([u, v])) * c.pdf(np.array([u, v])), 0, 1, 0, 1, epsabs=1e-9)[0]
        assert_allclose(4 * val - 1, tau, atol=1e-5)
        assert_allclose(c.tau, tau, atol=1e-10)

    @pytest.mark.parametrize("family,tau", [
        ("gumbel", 0.0), ("gumbel", -0.2), ("clayton", 1.0), ("frank", 0.0),
        ("gaussian", 1.0), ("independence", 0.3),
    ])
    def test_errors(self, family, tau):
        with pytest.raises(InvalidParameterError):
            bench.tau_to_param(family, tau)

    def test_unknown_family(self):
        with pytest.raises(InvalidParameterError):
            Family.parse("joe")

    def test_aliases(self):
        assert Family.parse("Gauss") is Family.GAUSSIAN
        assert Family.parse("t") is Family.STUDENT_T


class TestIae:
    def test_truth_has_zero_error(self):
        c = copula("gumbel", 0.7)
        assert bench.iae(c, c) == 0.0

    def test_against_independence(self):
        # |c - 1| averaged on the grid, computed directly
        c = copula("gaussian", 0.3)
        g = np.arange(1, 101) / 101
        uu, vv = np.meshgrid(g, g)
        direct = np.mean(np.abs(c.pdf(np.stack([uu, vv], -1)) - 1.0))
        assert_allclose(bench.iae(lambda p: np.ones(len(p)), c), direct, rtol=1e-13)

    def test_grid(self):
        assert bench.IAE_GRID.size == 100
        assert bench.IAE_GRID[0] == 1 / 101 and bench.IAE_GRID[-1] == 100 / 101


class TestScenarios:
    def test_default_matrix(self):
        sc = bench.scenario_matrix()
        # independence takes no tau: 2 sizes + 2 families x 2 taus x 2 sizes
        assert len(sc) == 10
        assert [s.label for s in sc[:3]] == ["independence_n200", "independence_n1000", "gaussian_tau0.3_n200"]
        assert len({s.label for s in sc}) == 10

    def test_copula_of_scenario(self):
        s = bench.Scenario(Family.GUMBEL, 0.7, 200)
        assert_allclose(s.copula.param, 1 / 0.3)


@pytest.fixture(scope="module")
def small_study():
    sc = bench.scenario_matrix(["gaussian"], [0.5], [150])
    return bench.run_study(sc, ["MR", "T"], reps=2, seeds=[4, 5])


class TestRunStudy:
    def test_shape(self, small_study):
        assert len(small_study) == 4
        assert [(r.method.value, r.rep) for r in small_study] == [("MR", 0), ("T", 0), ("MR", 1), ("T", 1)]
        assert all(not r.failed and r.iae_raw > 0 and r.iae_renorm > 0 for r in small_study)

    def test_deterministic_csv(self, small_study):
        sc = bench.scenario_matrix(["gaussian"], [0.5], [150])
        again = bench.run_study(sc, ["MR", "T"], reps=2, seeds=[4, 5])
        assert bench.write_results_csv(small_study) == bench.write_results_csv(again)

    def test_order_independent(self, small_study):
        sc = bench.scenario_matrix(["gaussian"], [0.5], [150])
        only_t = bench.run_study(sc, ["T"], reps=2, seeds=[4, 5])
        t_rows = [r for r in small_study if r.method is est.Method.T]
        assert [r.iae_raw for r in only_t] == [r.iae_raw for r in t_rows]

    def test_iae_oracle(self, small_study):
        # rebuild replicate 0 by hand and compare with the recorded errors
        from kercop import model
        from kercop import splinegrid as sg
        from kercop.numcore import ranks_to_pseudo

        sc = bench.scenario_matrix(["gaussian"], [0.5], [150])[0]
        data = ranks_to_pseudo(sc.copula.sample(150, seed=np.random.SeedSequence([4, 0])))
        f = model.fit(data, "MR", compute_stats=False)
        est_pdf = lambda p: model.density(f, p)  # noqa: E731
        assert_allclose(small_study[0].iae_renorm, bench.iae(est_pdf, sc.copula), rtol=1e-12)
        raw, _ = model.raw_field(est.PseudoSample(data), f.method, f.bandwidth, f.knots)
        assert_allclose(small_study[0].iae_raw, bench.iae(lambda p: np.maximum(sg.interp_2d(raw, p), 0), sc.copula), rtol=1e-12)

    def test_csv_layout(self, small_study):
        text = bench.write_results_csv(small_study)
        lines = text.splitlines()
        assert lines[0] == "scenario,method,rep,iae_raw,iae_renorm,error"
        assert lines[1].startswith("gaussian_tau0.5_n150,MR,0,")
        timed = bench.write_results_csv(small_study, timing=True)
        assert timed.splitlines()[0] == "scenario,method,rep,iae_raw,iae_renorm,millis,error"

    def test_write_to_handle(self, small_study):
        buf = io.StringIO()
        assert bench.write_results_csv(small_study, buf) is None
        assert buf.getvalue() == bench.write_results_csv(small_study)

    def test_process_pool_identical(self, small_study):
        sc = bench.scenario_matrix(["gaussian"], [0.5], [150])
        pooled = bench.run_study(sc, ["MR", "T"], reps=2, seeds=[4, 5], workers=2)
        assert bench.write_results_csv(pooled) == bench.write_results_csv(small_study)

    def test_bad_workers(self):
        with pytest.raises(InvalidParameterError):
            bench.run_study(bench.scenario_matrix(["gaussian"], [0.5], [100]), ["MR"], reps=1, workers=0)

    def test_need_seeds(self):
        with pytest.raises(InvalidParameterError):
            bench.run_study(bench.scenario_matrix(["gaussian"], [0.5], [100]), ["MR"], reps=3, seeds=[1])


class TestAbort:
    def _patched(self, monkeypatch, fail_reps):
        real = bench._fit_both
        calls = {"n": 0}

        def flaky(sample, method, renorm_iters, knots):
            k = calls["n"]
            calls["n"] += 1
            if k in fail_reps:
                raise KercopError("synthetic failure")
            return real(sample, method, renorm_iters, knots)

        monkeypatch.setattr(bench, "_fit_both", flaky)

    def test_minority_failures_recorded(self, monkeypatch):
        self._patched(monkeypatch, {0})
        res = bench.run_study(bench.scenario_matrix(["gaussian"], [0.5], [100]), ["MR"], reps=3)
        assert [r.failed for r in res] == [True, False, False]
        assert "synthetic failure" in res[0].error
        assert math.isnan(res[0].iae_raw)
        (row,) = bench.summarize(res)
        assert row.failures == 1 and row.reps == 3
        assert "KercopError: synthetic failure" in bench.write_results_csv(res)

    def test_majority_failures_abort(self, monkeypatch):
        self._patched(monkeypatch, {0, 1})
        with pytest.raises(bench.StudyAbortedError, match="gaussian_tau0.5_n100/MR"):
            bench.run_study(bench.scenario_matrix(["gaussian"], [0.5], [100]), ["MR"], reps=3)

    def test_half_does_not_abort(self, monkeypatch):
        self._patched(monkeypatch, {0})
        res = bench.run_study(bench.scenario_matrix(["gaussian"], [0.5], [100]), ["MR"], reps=2)
        assert sum(r.failed for r in res) == 1


def _result(label_tau, method, raw, ren, n=100):
    sc = bench.Scenario(Family.GAUSSIAN, label_tau, n)
    return bench.StudyResult(sc, est.Method.parse(method), 0, 0, raw, ren, 1.0)


class TestSummary:
    def test_summarize_means(self):
        res = [_result(0.3, "MR", 1.0, 0.8), _result(0.3, "MR", 3.0, 2.0)]
        (row,) = bench.summarize(res)
        assert_allclose([row.mean_iae_raw, row.mean_iae_renorm], [2.0, 1.4])
        # per-run gains 0.2 and 1/3
        assert_allclose(row.mean_gain, (0.2 + 1 / 3) / 2)

    def test_method_gains_average_scenarios(self):
        res = [
            _result(0.3, "MR", 1.0, 0.8),
            _result(0.3, "MR", 3.0, 2.0),
            _result(0.7, "MR", 2.0, 2.2),
            _result(0.7, "T", 1.0, 0.5),
        ]
        gains = bench.method_gains(res)
        # scenario 1: 1 - 1.4/2 = 0.3; scenario 2: 1 - 2.2/2 = -0.1
        assert_allclose(gains["MR"], 0.1)
        assert_allclose(gains["T"], 0.5)

    def test_format(self):
        text = bench.format_summary([_result(0.3, "MR", 1.0, 0.8)])
        assert "gaussian_tau0.3_n100" in text
        assert "20.0%" in text
        assert text.splitlines()[-1].split() == ["MR", "20.0%"]
