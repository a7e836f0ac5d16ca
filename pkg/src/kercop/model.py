"""Fitting pipeline and the density / distribution / simulation interface.

A fit evaluates a raw kernel estimator once on the knot grid, renormalizes
the resulting spline field towards uniform margins and from then on works
with the field only; the sample is not needed after :func:`fit` returns.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from kercop import estimators as est
from kercop import splinegrid as sg
from kercop.errors import InvalidParameterError
from kercop.numcore import QuasiStream, gaussian_quantile, quasi_points

LOGLIK_FLOOR = 1e-20
HINV_TOL = 1e-9
HINV_MAX_ITER = 60


@dataclass(frozen=True, eq=False)
class FittedCopula:
    """An estimated copula density, immutable after construction."""

    method: est.Method
    bandwidth: est.BandwidthSpec
    field: sg.SplineField
    n: int
    loglik: float
    edf: float
    renorm_iters: int
    cdf_table: np.ndarray = field(default=None, repr=False)
    tll_failures: int = 0

    def __post_init__(self):
        if self.cdf_table is None:
            object.__setattr__(self, "cdf_table", cdf_table(self.field))

    @property
    def knots(self):
        return self.field.knots

    def density(self, pts):
        return density(self, pts)

    def cdf(self, pts):
        return cdf(self, pts)

    def simulate(self, n, quasi=False, seed=None):
        return simulate(self, n, quasi=quasi, seed=seed)


def cdf_table(field):
    """``C(p_j, p_k)`` on the knot grid."""
    p = field.knots.knots
    table = _field_cdf(field, np.repeat(p, p.size), np.tile(p, p.size)).reshape(p.size, p.size)
    table.setflags(write=False)
    return table


CDF_NODES_PER_PIECE = 6


def _field_cdf(field, u, v, chunk=2000):
    """``C(u, v) = int_0^u H(s, v) ds`` with ``H`` the floored slice integral.

    ``H(s, v)`` integrates the floored density along ``t`` exactly, so the
    result is nondecreasing in ``v``. Along ``u`` the integral is taken by
    Gauss-Legendre quadrature on every polynomial piece; wherever the floor
    is inactive ``H`` is a cubic in ``s`` and the rule is exact.
    """
    knots = field.knots
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nodes, weights = _region_nodes(knots, CDF_NODES_PER_PIECE)
    piece_of_node = np.repeat(np.arange(knots.n_segments), CDF_NODES_PER_PIECE)
    fixed = _Slices(field, nodes)
    x, w = np.polynomial.legendre.leggauss(CDF_NODES_PER_PIECE)
    lo, _ = knots.s_bounds
    out = np.empty(u.shape[0])
    for start in range(0, u.shape[0], chunk):
        uc, vc = u[start:start + chunk], v[start:start + chunk]
        urow, _ = knots.locate(uc)
        vrow, vs = knots.locate(vc)
        # complete pieces left of u
        h_fixed = fixed.outer(vrow, vs)  # (nodes, points)
        mask = piece_of_node[:, None] < urow[None, :]
        full = np.sum(np.where(mask, weights[:, None] * h_fixed, 0.0), axis=0)
        # the piece holding u, from its left end to u
        left = knots.knots[urow + 1] + lo[urow] * knots.width[urow]
        half = 0.5 * (uc - left)
        part_nodes = left[:, None] + half[:, None] * (x + 1.0)
        sl = _Slices(field, part_nodes)
        h_part = sl.partial(np.broadcast_to(vrow[:, None], part_nodes.shape), np.broadcast_to(vs[:, None], part_nodes.shape))
        out[start:start + chunk] = full + half * (h_part @ w)
    return out


def grid_points(knots):
    """All knot pairs ``(p_j, p_k)`` in the row-major order of the field."""
    p = knots.knots
    uu, vv = np.meshgrid(p, p, indexing="ij")
    return np.column_stack([uu.ravel(), vv.ravel()])


def raw_field(s, method, bw, knots):
    """Raw estimator values on the knot grid and the number of TLL fallbacks."""
    vals, failures = est.evaluate(s, method, bw, grid_points(knots), return_failures=True)
    return sg.SplineField(knots, vals.reshape(knots.m, knots.m)), failures


def fit(
    s,
    method=est.Method.TLL2NN,
    knots=sg.DEFAULT_KNOTS,
    mult=1.0,
    renorm_iters=sg.DEFAULT_RENORM_ITERS,
    bw_override=None,
    compute_stats=True,
):
    """Estimate the copula density of the pseudo-observations `s`.

    Parameters
    ----------
    s : array-like of shape (n, 2) or PseudoSample
        Copula data strictly inside the unit square.
    method : str or Method
        One of MR, BETA, T, TLL1, TLL2, TLL1NN, TLL2NN.
    knots : int
        Number of knots per axis of the interpolation grid.
    mult : float
        Bandwidth multiplier; values above one give smoother estimates.
    renorm_iters : int
        Number of renormalization passes.
    bw_override : BandwidthSpec, optional
        Used verbatim instead of the automatic bandwidth.
    compute_stats : bool
        When False the log-likelihood and effective number of parameters
        are left as NaN (saves one pass over the data).

    Returns
    -------
    FittedCopula
    """
    method = est.Method.parse(method)
    s = s if isinstance(s, est.PseudoSample) else est.PseudoSample(s)
    if bw_override is not None:
        bw = bw_override.check_for(method)
    else:
        bw = est.select_bandwidth(s, method, mult)
    kv = sg.make_knots(knots)
    raw, failures = raw_field(s, method, bw, kv)
    fld = sg.renormalize(raw, renorm_iters)
    loglik = edf = float("nan")
    if compute_stats:
        dens = np.maximum(sg.interp_2d(fld, s.points), 0.0)
        loglik = float(np.sum(np.log(np.maximum(dens, LOGLIK_FLOOR))))
        infl = est.self_influence(s, method, bw)
        edf = float(np.clip(np.sum(infl), 1.0, s.n - 2.0))
    return FittedCopula(
        method=method,
        bandwidth=bw,
        field=fld,
        n=s.n,
        loglik=loglik,
        edf=edf,
        renorm_iters=int(renorm_iters),
        tll_failures=failures,
    )


def density(f, pts):
    """Copula density of the fit at `pts` (interpolated, floored at zero)."""
    return np.maximum(sg.interp_2d(f.field, pts), 0.0)


def cdf(f, pts):
    """Copula distribution function, clamped to [0, 1].

    The integral of :func:`density` over ``[0, u] x [0, v]``: exact along
    ``v``, Gauss-Legendre along ``u`` (see ``_field_cdf``). Its derivative
    in ``u`` is the unnormalized h-function.
    """
    pts = sg._check_points(pts)
    flat = pts.reshape(-1, 2)
    val = _field_cdf(f.field, flat[:, 0], flat[:, 1])
    return np.clip(val, 0.0, 1.0).reshape(pts.shape[:-1])


class _Slices:
    """Floored density slices ``s -> c(u_i, s)`` for a batch of ``u`` values."""

    def __init__(self, f, u):
        fld = getattr(f, "field", f)
        knots = fld.knots
        u = np.asarray(u, dtype=float)
        iu, wu = sg.stencil_weights(knots, u)
        self.knots = knots
        self.values = np.einsum("...a,...ab->...b", wu, fld.values[iu])
        self.coefs = sg.segment_coeffs(self.values, knots)
        lo, hi = knots.s_bounds
        self.seg = knots.width * sg._positive_part_integral(self.coefs, lo, hi)
        self.cum = np.concatenate([np.zeros(u.shape + (1,)), np.cumsum(self.seg, axis=-1)], axis=-1)
        self.total = self.cum[..., -1]

    def partial(self, row, s):
        """Integral from 0 to the point at local coordinate `s` of segment `row`."""
        lo, _ = self.knots.s_bounds
        c = np.take_along_axis(self.coefs, row[..., None, None], axis=-2)[..., 0, :]
        part = self.knots.width[row] * sg._positive_part_integral(c, lo[row], np.maximum(s, lo[row]))
        return np.take_along_axis(self.cum, row[..., None], axis=-1)[..., 0] + part

    def outer(self, row, s):
        """Like :meth:`partial` for every slice at every point ``(row, s)``;
        the result has shape ``u.shape + row.shape``."""
        lo, _ = self.knots.s_bounds
        c = self.coefs[..., row, :]
        part = self.knots.width[row] * sg._positive_part_integral(c, lo[row], np.maximum(s, lo[row]))
        return self.cum[..., row] + part


def hfunc(f, v, given_u):
    """Conditional distribution ``C(v | u)``, normalized so that ``C(1 | u) = 1``."""
    v, u = np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(given_u, dtype=float))
    sl = _Slices(f, u)
    row, s = f.knots.locate(v)
    out = sl.partial(row, s) / sl.total
    out = np.where(v >= 1.0, 1.0, np.where(v <= 0.0, 0.0, out))
    return np.clip(out, 0.0, 1.0)


def hfunc_inverse(f, w, given_u):
    """Inverse of :func:`hfunc` in ``v`` by bisection."""
    w, u = np.broadcast_arrays(np.asarray(w, dtype=float), np.asarray(given_u, dtype=float))
    if np.any((w < 0) | (w > 1)):
        raise InvalidParameterError("probabilities must lie in [0, 1]")
    sl = _Slices(f, u)
    knots = f.knots
    target = w * sl.total
    nseg = knots.n_segments
    # segment holding the target, then bisection on its local coordinate
    row = np.clip(np.sum(sl.cum[..., 1:-1] < target[..., None], axis=-1), 0, nseg - 1)
    lo_s, hi_s = knots.s_bounds
    a = lo_s[row].astype(float)
    b = hi_s[row].astype(float)
    for _ in range(HINV_MAX_ITER):
        mid = 0.5 * (a + b)
        val = sl.partial(row, mid)
        below = val < target
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
        if np.all(np.abs(val - target) <= HINV_TOL * sl.total):
            break
    s = 0.5 * (a + b)
    v = knots.knots[row + 1] + s * knots.width[row]
    v = np.where(w >= 1.0, 1.0, np.where(w <= 0.0, 0.0, v))
    return np.clip(v, 0.0, 1.0)


def simulate(f, n, quasi=False, seed=None):
    """Draw `n` points from the fit by conditional inversion.

    With ``quasi=True`` the uniforms come from a randomly shifted Halton
    stream, otherwise from numpy's default generator.
    """
    if n < 1:
        raise InvalidParameterError("n must be positive")
    if quasi:
        w = quasi_points(QuasiStream.from_seed(seed), n)
    else:
        w = np.random.default_rng(seed).random((n, 2))
    return np.column_stack([w[:, 0], hfunc_inverse(f, w[:, 1], w[:, 0])])


def information_criteria(loglik, edf, n):
    """AIC, corrected AIC and BIC from a log-likelihood and effective df."""
    if n <= edf + 1:
        raise InvalidParameterError("cAIC undefined: sample size must exceed edf + 1")
    aic = -2.0 * loglik + 2.0 * edf
    caic = aic + 2.0 * edf * (edf + 1.0) / (n - edf - 1.0)
    bic = -2.0 * loglik + math.log(n) * edf
    return {"loglik": loglik, "edf": edf, "aic": aic, "caic": caic, "bic": bic}


def fit_stats(f):
    return information_criteria(f.loglik, f.edf, f.n)


@dataclass(frozen=True)
class DependenceReport:
    kendall: float
    spearman: float
    blomqvist: float
    gini: float
    vd_waerden: float
    minfo: float
    linfoot: float
    samples_used: int

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def dep_measures(f, n_qmc=10_000, seed=0):
    """Copula-based dependence measures by quasi-Monte Carlo under the fit."""
    sample = simulate(f, n_qmc, quasi=True, seed=seed)
    u, v = sample.T
    kendall = 4.0 * np.mean(cdf(f, sample)) - 1.0
    spearman = 12.0 * np.mean(u * v) - 3.0
    blomqvist = 4.0 * float(cdf(f, np.array([0.5, 0.5]))) - 1.0
    gini = 2.0 * np.mean(np.abs(u + v - 1.0) - np.abs(u - v))
    eps = 1e-12
    zu = gaussian_quantile(np.clip(u, eps, 1 - eps))
    zv = gaussian_quantile(np.clip(v, eps, 1 - eps))
    vdw = float(np.corrcoef(zu, zv)[0, 1])
    minfo = float(np.mean(np.log(np.maximum(density(f, sample), LOGLIK_FLOOR))))
    linfoot = math.sqrt(1.0 - math.exp(-2.0 * max(minfo, 0.0)))

    def unit(x):
        return float(np.clip(x, -1.0, 1.0))

    return DependenceReport(
        kendall=unit(kendall),
        spearman=unit(spearman),
        blomqvist=unit(blomqvist),
        gini=unit(gini),
        vd_waerden=unit(vdw),
        minfo=minfo,
        linfoot=linfoot,
        samples_used=n_qmc,
    )


def _region_nodes(knots, per_region):
    """Gauss-Legendre nodes placed inside each polynomial piece of [0, 1]."""
    lo, hi = knots.s_bounds
    left = knots.knots[1:-2] + lo * knots.width
    right = knots.knots[1:-2] + hi * knots.width
    x, w = np.polynomial.legendre.leggauss(per_region)
    half = 0.5 * (right - left)
    nodes = (left[:, None] + half[:, None] * (x + 1.0)).ravel()
    weights = (half[:, None] * w).ravel()
    return nodes, weights


def kendall_tau_quadrature(f, per_region=5):
    """``4 * int C c - 1`` by Gauss-Legendre quadrature on the spline pieces.

    Five nodes per piece integrate the product exactly wherever the density
    is positive, since there both factors are polynomials on the piece.
    """
    nodes, weights = _region_nodes(f.knots, per_region)
    uu, vv = np.meshgrid(nodes, nodes, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    integrand = cdf(f, pts) * density(f, pts)
    return 4.0 * float(weights @ integrand.reshape(nodes.size, nodes.size) @ weights) - 1.0


def sample_kendall_tau(x):
    from scipy import stats

    return float(stats.kendalltau(x[:, 0], x[:, 1])[0])
