"""Parametric copula oracles and the simulation-study harness.

The parametric families serve as ground truth: they generate data, and
their closed-form densities are compared with kernel estimates through the
integrated absolute error (IAE).
"""

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import integrate, optimize, special, stats

from kercop import estimators as est
from kercop import model
from kercop import splinegrid as sg
from kercop.errors import InvalidParameterError, KercopError
from kercop.numcore import ranks_to_pseudo

STUDENT_DF = 3.0
IAE_GRID = np.arange(1, 101) / 101.0
DEFAULT_REPS = 20
DEFAULT_FAMILIES = ("independence", "gaussian", "gumbel")
DEFAULT_TAUS = (0.3, 0.7)
DEFAULT_SIZES = (200, 1000)


class Family(str, Enum):
    INDEPENDENCE = "independence"
    GAUSSIAN = "gaussian"
    GUMBEL = "gumbel"
    CLAYTON = "clayton"
    FRANK = "frank"
    STUDENT_T = "student_t"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"indep": "independence", "gauss": "gaussian", "t": "student_t", "student": "student_t"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidParameterError(f"unknown copula family {name!r}") from None

    @property
    def archimedean(self):
        return self in (Family.GUMBEL, Family.CLAYTON, Family.FRANK)


def _frank_tau(theta):
    """Kendall's tau of the Frank copula, ``1 - 4/theta * (1 - D1(theta))``."""
    debye, _ = integrate.quad(lambda t: t / math.expm1(t) if t > 0 else 1.0, 0.0, theta)
    return 1.0 - 4.0 / theta * (1.0 - debye / theta)


@dataclass(frozen=True)
class ParametricCopula:
    """A one-parameter bivariate copula.

    `param` is the correlation for the elliptical families and the
    generator parameter for the Archimedean ones; it is ignored for the
    independence copula.
    """

    family: Family
    param: float = 0.0

    def __post_init__(self):
        fam = Family.parse(self.family)
        object.__setattr__(self, "family", fam)
        p = float(self.param)
        object.__setattr__(self, "param", p)
        bounds = {
            Family.GAUSSIAN: (-1.0, 1.0, "rho must lie in (-1, 1)"),
            Family.STUDENT_T: (-1.0, 1.0, "rho must lie in (-1, 1)"),
            Family.GUMBEL: (1.0, math.inf, "theta must be >= 1"),
            Family.CLAYTON: (0.0, math.inf, "theta must be > 0"),
            Family.FRANK: (0.0, math.inf, "theta must be > 0"),
        }
        if fam in bounds:
            lo, hi, msg = bounds[fam]
            ok = (lo <= p < hi) if fam is Family.GUMBEL else (lo < p < hi)
            if not (ok and math.isfinite(p)):
                raise InvalidParameterError(f"{fam.value}: {msg}, got {p}")

    @property
    def tau(self):
        fam, p = self.family, self.param
        if fam is Family.INDEPENDENCE:
            return 0.0
        if fam in (Family.GAUSSIAN, Family.STUDENT_T):
            return 2.0 / math.pi * math.asin(p)
        if fam is Family.GUMBEL:
            return 1.0 - 1.0 / p
        if fam is Family.CLAYTON:
            return p / (p + 2.0)
        return _frank_tau(p)

    def pdf(self, pts):
        return copula_pdf(self, pts)

    def cdf(self, pts):
        return copula_cdf(self, pts)

    def sample(self, n, seed=None):
        return copula_sample(self, n, seed)


def tau_to_param(family, tau):
    """Map Kendall's tau to the family parameter.

    Returns
    -------
    ParametricCopula
    """
    fam = Family.parse(family)
    tau = float(tau)
    if fam is Family.INDEPENDENCE:
        if tau != 0.0:
            raise InvalidParameterError("independence: tau must be 0")
        return ParametricCopula(fam)
    if fam in (Family.GAUSSIAN, Family.STUDENT_T):
        if not -1.0 < tau < 1.0:
            raise InvalidParameterError(f"{fam.value}: tau must lie in (-1, 1), got {tau}")
        return ParametricCopula(fam, math.sin(math.pi * tau / 2.0))
    if not 0.0 < tau < 1.0:
        raise InvalidParameterError(f"{fam.value}: tau must lie in (0, 1), got {tau}")
    if fam is Family.GUMBEL:
        return ParametricCopula(fam, 1.0 / (1.0 - tau))
    if fam is Family.CLAYTON:
        return ParametricCopula(fam, 2.0 * tau / (1.0 - tau))
    hi = 1.0
    while _frank_tau(hi) < tau:
        hi *= 2.0
    theta = optimize.brentq(lambda t: _frank_tau(t) - tau, 1e-6, hi, xtol=1e-12, rtol=1e-14)
    return ParametricCopula(fam, theta)


def _split(pts):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] != 2:
        raise InvalidParameterError("points must have a trailing dimension of 2")
    return pts[..., 0], pts[..., 1]


def _log_pdf_interior(c, u, v):
    fam, p = c.family, c.param
    if fam is Family.INDEPENDENCE:
        return np.zeros(np.broadcast(u, v).shape)
    if fam is Family.GAUSSIAN:
        x, y = special.ndtri(u), special.ndtri(v)
        q = 1.0 - p * p
        return -0.5 * math.log(q) - (p * p * (x * x + y * y) - 2.0 * p * x * y) / (2.0 * q)
    if fam is Family.STUDENT_T:
        nu = STUDENT_DF
        x, y = stats.t.ppf(u, nu), stats.t.ppf(v, nu)
        q = 1.0 - p * p
        quad = (x * x + y * y - 2.0 * p * x * y) / q
        joint = (
            special.gammaln((nu + 2) / 2)
            - special.gammaln(nu / 2)
            - math.log(nu * math.pi)
            - 0.5 * math.log(q)
            - (nu + 2) / 2 * np.log1p(quad / nu)
        )
        return joint - stats.t.logpdf(x, nu) - stats.t.logpdf(y, nu)
    if fam is Family.GUMBEL:
        x, y = -np.log(u), -np.log(v)
        a = x**p + y**p
        r = a ** (1.0 / p)
        return (
            -r
            + x
            + y
            + (p - 1.0) * (np.log(x) + np.log(y))
            + (2.0 / p - 2.0) * np.log(a)
            + np.log1p((p - 1.0) / r)
        )
    if fam is Family.CLAYTON:
        s = u**-p + v**-p - 1.0
        return math.log1p(p) - (p + 1.0) * (np.log(u) + np.log(v)) - (2.0 + 1.0 / p) * np.log(s)
    # Frank; the denominator equals exp(-p * min(u, v)) * _frank_inner
    a, b = np.minimum(u, v), np.maximum(u, v)
    return math.log(-p * math.expm1(-p)) - p * (b - a) - 2.0 * np.log(_frank_inner(p, a, b))


def _frank_inner(p, a, b):
    """``(1 - e^{-pb}) + e^{-p(b-a)} (1 - e^{-p(1-b)})`` for ``a <= b``."""
    return -np.expm1(-p * b) - np.exp(-p * (b - a)) * np.expm1(-p * (1.0 - b))


def copula_pdf(c, pts):
    """Copula density at `pts`; zero on the boundary of the unit square."""
    u, v = _split(pts)
    inside = (u > 0) & (u < 1) & (v > 0) & (v < 1)
    uc = np.where(inside, u, 0.5)
    vc = np.where(inside, v, 0.5)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out = np.exp(_log_pdf_interior(c, uc, vc))
    return np.where(inside, out, 0.0)


def _cdf_interior(c, u, v):
    fam, p = c.family, c.param
    if fam is Family.INDEPENDENCE:
        return u * v
    if fam in (Family.GAUSSIAN, Family.STUDENT_T):
        corr = [[1.0, p], [p, 1.0]]
        if fam is Family.GAUSSIAN:
            x, y = special.ndtri(u), special.ndtri(v)
            flat = np.column_stack([np.ravel(x), np.ravel(y)])
            vals = stats.multivariate_normal.cdf(flat, mean=[0.0, 0.0], cov=corr, abseps=1e-10, releps=1e-10)
        else:
            x, y = stats.t.ppf(u, STUDENT_DF), stats.t.ppf(v, STUDENT_DF)
            flat = np.column_stack([np.ravel(x), np.ravel(y)])
            dist = stats.multivariate_t(loc=[0.0, 0.0], shape=corr, df=STUDENT_DF)
            vals = dist.cdf(flat, random_state=0)
        vals = np.atleast_1d(vals)
        return vals.reshape(np.shape(x))
    if fam is Family.GUMBEL:
        return np.exp(-(((-np.log(u)) ** p + (-np.log(v)) ** p) ** (1.0 / p)))
    if fam is Family.CLAYTON:
        return (u**-p + v**-p - 1.0) ** (-1.0 / p)
    # Frank, factored so that every term is positive (stable for large theta)
    a, b = np.minimum(u, v), np.maximum(u, v)
    return a - (np.log(_frank_inner(p, a, b)) - math.log(-math.expm1(-p))) / p


def copula_cdf(c, pts):
    """Copula distribution function, exact on the boundary (``C(u,1) = u``)."""
    u, v = _split(pts)
    shape = np.broadcast(u, v).shape
    u, v = (np.array(np.broadcast_to(a, shape), dtype=float, ndmin=1) for a in (u, v))
    if np.any((u < 0) | (u > 1) | (v < 0) | (v > 1)):
        raise InvalidParameterError("copula arguments must lie in [0, 1]")
    out = np.minimum(u, v).astype(float)
    out = np.where(u >= 1.0, v, np.where(v >= 1.0, u, out))
    out = np.where((u <= 0.0) | (v <= 0.0), 0.0, out)
    inside = (u > 0) & (u < 1) & (v > 0) & (v < 1)
    if np.any(inside):
        out = out.copy()
        out[inside] = _cdf_interior(c, u[inside], v[inside])
    return np.clip(out, 0.0, 1.0).reshape(shape)


def _positive_stable(alpha, size, rng):
    """Positive stable variates with Laplace transform ``exp(-s**alpha)``
    (Kanter's representation)."""
    w = rng.uniform(0.0, math.pi, size)
    e = rng.exponential(1.0, size)
    return (np.sin(alpha * w) / np.sin(w) ** (1.0 / alpha)) * (
        np.sin((1.0 - alpha) * w) / e
    ) ** ((1.0 - alpha) / alpha)


def copula_sample(c, n, seed=None):
    """Draw `n` points from the copula with a seeded generator."""
    if n < 1:
        raise InvalidParameterError("n must be positive")
    rng = np.random.default_rng(seed)
    fam, p = c.family, c.param
    if fam is Family.INDEPENDENCE:
        return rng.random((n, 2))
    if fam in (Family.GAUSSIAN, Family.STUDENT_T):
        z = rng.standard_normal((n, 2))
        z[:, 1] = p * z[:, 0] + math.sqrt(1.0 - p * p) * z[:, 1]
        if fam is Family.GAUSSIAN:
            return special.ndtr(z)
        scale = np.sqrt(rng.chisquare(STUDENT_DF, n) / STUDENT_DF)
        return stats.t.cdf(z / scale[:, None], STUDENT_DF)
    if fam is Family.GUMBEL:
        e = rng.exponential(1.0, (n, 2))
        if p == 1.0:
            return np.exp(-e)
        s = _positive_stable(1.0 / p, n, rng)
        return np.exp(-((e / s[:, None]) ** (1.0 / p)))
    if fam is Family.CLAYTON:
        e = rng.exponential(1.0, (n, 2))
        g = rng.gamma(1.0 / p, 1.0, n)
        return (1.0 + e / g[:, None]) ** (-1.0 / p)
    # Frank: invert the conditional distribution of V given U = u
    u, w = rng.random(n), rng.random(n)
    a = np.exp(-p * u)
    v = -np.log1p(w * np.expm1(-p) / (w + (1.0 - w) * a)) / p
    return np.column_stack([u, v])


def iae(estimate, truth, grid=IAE_GRID):
    """Mean of ``|estimate - truth|`` over the grid ``(j/101, k/101)``.

    `estimate` and `truth` are callables mapping an (k, 2) array of points
    to k density values (a :class:`ParametricCopula` is accepted for
    `truth`).
    """
    uu, vv = np.meshgrid(grid, grid, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    f_hat = estimate.pdf if isinstance(estimate, ParametricCopula) else estimate
    f_true = truth.pdf if isinstance(truth, ParametricCopula) else truth
    return float(np.mean(np.abs(np.asarray(f_hat(pts)) - np.asarray(f_true(pts)))))


# --------------------------------------------------------------------------
# simulation study


@dataclass(frozen=True)
class Scenario:
    family: Family
    tau: float
    n: int

    @property
    def label(self):
        if self.family is Family.INDEPENDENCE:
            return f"{self.family.value}_n{self.n}"
        return f"{self.family.value}_tau{self.tau:g}_n{self.n}"

    @property
    def copula(self):
        return tau_to_param(self.family, self.tau)


def scenario_matrix(families=DEFAULT_FAMILIES, taus=DEFAULT_TAUS, sizes=DEFAULT_SIZES):
    """Cartesian study design; the independence family takes no tau."""
    out = []
    for fam in map(Family.parse, families):
        fam_taus = (0.0,) if fam is Family.INDEPENDENCE else taus
        for tau in fam_taus:
            for n in sizes:
                out.append(Scenario(fam, float(tau), int(n)))
    return out


@dataclass(frozen=True)
class StudyResult:
    scenario: Scenario
    method: est.Method
    rep: int
    seed: int
    iae_raw: float
    iae_renorm: float
    fit_millis: float
    error: str = ""

    @property
    def failed(self):
        return bool(self.error)

    @property
    def renorm_gain(self):
        if self.failed or self.iae_raw <= 0.0:
            return float("nan")
        return (self.iae_raw - self.iae_renorm) / self.iae_raw


class StudyAbortedError(KercopError, RuntimeError):
    """More than half of the replicates of a scenario failed."""


def _fit_both(sample, method, renorm_iters, knots):
    """One estimator run yielding the raw and the renormalized field."""
    s = est.PseudoSample(sample)
    bw = est.select_bandwidth(s, method, 1.0)
    raw, _ = model.raw_field(s, method, bw, sg.make_knots(knots))
    return raw, sg.renormalize(raw, renorm_iters)


def _iae_grid():
    uu, vv = np.meshgrid(IAE_GRID, IAE_GRID, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()])


def _run_replicate(k, sc, r, seed, methods, renorm_iters, knots):
    """All methods on replicate `r` of scenario number `k` (one job)."""
    grid = _iae_grid()
    truth = sc.copula.pdf(grid)
    data = copula_sample(sc.copula, sc.n, seed=np.random.SeedSequence([seed, k]))
    sample = ranks_to_pseudo(data)
    rows = []
    for m in methods:
        t0 = time.perf_counter()
        try:
            raw, ren = _fit_both(sample, m, renorm_iters, knots)
            dens_ren = np.maximum(sg.interp_2d(ren, grid), 0.0)
            millis = 1e3 * (time.perf_counter() - t0)
            dens_raw = np.maximum(sg.interp_2d(raw, grid), 0.0)
            rows.append(StudyResult(
                sc, m, r, seed,
                float(np.mean(np.abs(dens_raw - truth))),
                float(np.mean(np.abs(dens_ren - truth))),
                millis,
            ))
        except (KercopError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rows.append(StudyResult(sc, m, r, seed, math.nan, math.nan, math.nan, f"{type(exc).__name__}: {exc}"))
    return rows


def run_study(
    scenarios,
    methods,
    reps=DEFAULT_REPS,
    seeds=None,
    renorm_iters=sg.DEFAULT_RENORM_ITERS,
    knots=sg.DEFAULT_KNOTS,
    progress=None,
    workers=1,
):
    """Run every (scenario, method, replicate) combination.

    Replicate ``r`` of a scenario draws its data from the generator seeded
    with ``(seeds[r], scenario index)``, so all methods see the same data
    and results do not depend on execution order.

    Each run fits the estimator once on the knot grid; the IAE is recorded
    for the raw field and for the field after `renorm_iters`
    renormalization passes. `fit_millis` covers estimation plus the
    100 x 100 evaluation of the renormalized fit.

    Parameters
    ----------
    workers : int
        Replicates are independent jobs; with ``workers > 1`` they run in
        a process pool. Results come back in the same order either way.

    Returns
    -------
    list of StudyResult

    Raises
    ------
    StudyAbortedError
        When more than half of the replicates of a (scenario, method)
        pair failed.
    """
    methods = [est.Method.parse(m) for m in methods]
    seeds = list(range(reps)) if seeds is None else [int(x) for x in seeds]
    if len(seeds) < reps:
        raise InvalidParameterError("need one seed per replicate")
    if workers < 1:
        raise InvalidParameterError("workers must be positive")
    seeds = seeds[:reps]
    jobs = [(k, sc, r, seed) for k, sc in enumerate(scenarios) for r, seed in enumerate(seeds)]
    args = [methods, renorm_iters, knots]
    if workers == 1:
        batches = (_run_replicate(*job, *args) for job in jobs)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        batches = pool.map(_run_replicate, *zip(*[job + tuple(args) for job in jobs]))
    results = []
    try:
        for k, sc in enumerate(scenarios):
            scen_rows = []
            for _ in seeds:
                for row in next(batches):
                    scen_rows.append(row)
                    if progress is not None:
                        progress(row)
            for m in methods:
                rows = [x for x in scen_rows if x.method is m]
                if sum(x.failed for x in rows) * 2 > len(rows):
                    raise StudyAbortedError(f"{sc.label}/{m.value}: more than half of the replicates failed")
            results.extend(scen_rows)
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return results


@dataclass
class SummaryRow:
    scenario: str
    method: str
    mean_iae_raw: float
    mean_iae_renorm: float
    mean_gain: float
    failures: int
    reps: int = field(default=0)


def summarize(results):
    """Per (scenario, method) means, in first-seen order."""
    groups = {}
    for r in results:
        groups.setdefault((r.scenario.label, r.method.value), []).append(r)
    out = []
    for (label, meth), rows in groups.items():
        ok = [r for r in rows if not r.failed]
        mean = (lambda xs: float(np.mean(xs)) if xs else math.nan)
        out.append(
            SummaryRow(
                label, meth,
                mean([r.iae_raw for r in ok]),
                mean([r.iae_renorm for r in ok]),
                mean([r.renorm_gain for r in ok]),
                len(rows) - len(ok),
                len(rows),
            )
        )
    return out


def method_gains(results):
    """Relative IAE reduction from renormalization per method, averaged
    over scenarios: ``1 - mean(iae_renorm) / mean(iae_raw)`` per scenario,
    then the mean over scenarios."""
    per = {}
    for row in summarize(results):
        if math.isfinite(row.mean_iae_raw) and row.mean_iae_raw > 0:
            per.setdefault(row.method, []).append(1.0 - row.mean_iae_renorm / row.mean_iae_raw)
    return {m: float(np.mean(v)) for m, v in per.items()}


RESULT_COLUMNS = ("scenario", "method", "rep", "iae_raw", "iae_renorm")


def write_results_csv(results, fh=None, timing=False):
    """Write the per-run table. Timing is excluded by default so that the
    file is byte-identical across identical invocations."""
    cols = RESULT_COLUMNS + (("millis",) if timing else ()) + ("error",)
    buf = fh if fh is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in results:
        row = [r.scenario.label, r.method.value, r.rep, f"{r.iae_raw:.10g}", f"{r.iae_renorm:.10g}"]
        if timing:
            row.append(f"{r.fit_millis:.1f}")
        row.append(r.error)
        w.writerow(row)
    return buf.getvalue() if fh is None else None


def format_summary(results):
    rows = summarize(results)
    lines = [f"{'scenario':<28}{'method':<8}{'iae_raw':>10}{'iae_renorm':>12}{'gain':>8}{'fail':>6}"]
    for r in rows:
        lines.append(
            f"{r.scenario:<28}{r.method:<8}{r.mean_iae_raw:>10.4f}{r.mean_iae_renorm:>12.4f}"
            f"{100 * r.mean_gain:>7.1f}%{r.failures:>6}"
        )
    lines.append("")
    lines.append("mean renormalization gain by method:")
    for m, g in method_gains(results).items():
        lines.append(f"  {m:<8}{100 * g:>7.1f}%")
    return "\n".join(lines)
