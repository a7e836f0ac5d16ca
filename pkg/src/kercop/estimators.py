"""Raw kernel estimators of a bivariate copula density and their bandwidths.

Four families are implemented:

* ``MR``: Gaussian product kernel on the sample mirrored at all edges and
  corners of the unit square.
* ``BETA``: product of beta kernels whose shape follows the evaluation point.
* ``T``: Gaussian kernel density estimate on the normal-scores scale,
  back-transformed through the normal margins.
* ``TLL*``: local likelihood on the normal-scores scale with a log-linear
  or log-quadratic local model, fixed or nearest-neighbour bandwidths.

All evaluators take pseudo-observations and points in the unit square and
return raw (not renormalized) density values.
"""

import enum
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special

from kercop.errors import (
    DegenerateDataError,
    DomainError,
    InvalidBandwidthError,
    InvalidParameterError,
)
from kercop.numcore import beta_density, cov_sqrt, gaussian_cdf, gaussian_quantile

MIN_SAMPLE_SIZE = 10

# evaluation points are clamped to this range before the normal quantile
Z_CLAMP = 8.2

# candidate grids for cross-validated smoothing parameters
ALPHA_GRID = np.logspace(np.log10(0.05), 0.0, 20)
KAPPA_GRID = np.logspace(np.log10(0.1), np.log10(3.0), 20)
FALLBACK_ALPHA = 0.35

# Newton solver settings for the local likelihood fits
NEWTON_MAX_ITER = 25
NEWTON_GTOL = 1e-6
_MAX_HALVINGS = 40


def _tricube_sd():
    # per-coordinate sd of the radial tricube kernel (1 - r^3)^3 on the unit disk
    def moment(a):
        return sum(math.comb(3, k) * (-1) ** k / (a + 1 + 3 * k) for k in range(4))

    return math.sqrt(0.5 * moment(3) / moment(1))


# The local likelihood bandwidths (rule of thumb and nearest-neighbour
# distances) are kernel radii; the Gaussian kernel used in the fits has
# the same second moment as a tricube kernel with that radius.
TLL_KERNEL_SCALE = _tricube_sd()

_LOG_2PI = math.log(2.0 * math.pi)


class TLLConvergenceWarning(RuntimeWarning):
    pass


class Method(str, enum.Enum):
    MR = "MR"
    BETA = "BETA"
    T = "T"
    TLL1 = "TLL1"
    TLL2 = "TLL2"
    TLL1NN = "TLL1NN"
    TLL2NN = "TLL2NN"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise InvalidParameterError(f"unknown method {name!r}; choose from {choices}") from None

    @property
    def degree(self):
        return {Method.TLL1: 1, Method.TLL1NN: 1, Method.TLL2: 2, Method.TLL2NN: 2}.get(self, 0)

    @property
    def nearest_neighbor(self):
        return self in (Method.TLL1NN, Method.TLL2NN)

    @property
    def local_likelihood(self):
        return self.degree > 0

    @property
    def scalar_bandwidth(self):
        return self in (Method.MR, Method.BETA)


class PseudoSample:
    """Bivariate observations strictly inside the unit square."""

    def __init__(self, points, min_size=MIN_SAMPLE_SIZE):
        pts = np.array(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise InvalidParameterError("copula data must be an (n, 2) array")
        if pts.shape[0] < min_size:
            raise InvalidParameterError(f"need at least {min_size} observations, got {pts.shape[0]}")
        if np.any(np.isnan(pts)):
            raise InvalidParameterError("copula data contain NaN")
        if np.any((pts <= 0.0) | (pts >= 1.0)):
            raise DomainError(
                "copula data must lie strictly inside (0, 1); "
                "apply ranks_to_pseudo to raw data first"
            )
        pts.setflags(write=False)
        self.points = pts

    @property
    def n(self):
        return self.points.shape[0]

    @cached_property
    def z(self):
        """Normal scores of the sample."""
        return gaussian_quantile(self.points)

    def swapped(self):
        return PseudoSample(self.points[:, ::-1], min_size=1)


def as_sample(s):
    return s if isinstance(s, PseudoSample) else PseudoSample(s, min_size=1)


@dataclass(frozen=True, eq=False)
class BandwidthSpec:
    """Smoothing parameters of one estimator.

    ``scalar_b`` is used by MR and BETA, ``matrix_B`` by T and fixed-bandwidth
    TLL, ``nn_alpha`` with ``shape`` by the nearest-neighbour variants. For the
    first two groups `mult` is already folded into the stored value; for
    nearest-neighbour bandwidths it rescales each local bandwidth matrix.
    """

    scalar_b: float | None = None
    matrix_B: np.ndarray | None = None
    nn_alpha: float | None = None
    shape: np.ndarray | None = None
    mult: float = 1.0

    def __post_init__(self):
        if not self.mult > 0:
            raise InvalidBandwidthError("mult must be positive")
        if self.scalar_b is not None and not self.scalar_b > 0:
            raise InvalidBandwidthError("scalar bandwidth must be positive")
        for name in ("matrix_B", "shape"):
            mat = getattr(self, name)
            if mat is not None:
                mat = np.array(mat, dtype=float)
                if mat.shape != (2, 2) or not np.all(np.isfinite(mat)):
                    raise InvalidBandwidthError(f"{name} must be a finite 2x2 matrix")
                mat.setflags(write=False)
                object.__setattr__(self, name, mat)
        if self.nn_alpha is not None and not 0.0 < self.nn_alpha <= 1.0:
            raise InvalidBandwidthError("nn_alpha must lie in (0, 1]")

    def check_for(self, method):
        method = Method.parse(method)
        if method.scalar_bandwidth:
            wanted = {"scalar_b"}
        elif method.nearest_neighbor:
            wanted = {"nn_alpha", "shape"}
        else:
            wanted = {"matrix_B"}
        present = {k for k in ("scalar_b", "matrix_B", "nn_alpha", "shape") if getattr(self, k) is not None}
        if present != wanted:
            raise InvalidBandwidthError(f"bandwidth does not fit method {method.value}")
        return self


# ---------------------------------------------------------------------------
# helpers


def _check_points(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if pts.shape[-1] != 2:
        raise DomainError("points must have two coordinates")
    if np.any((pts < 0.0) | (pts > 1.0)) or np.any(np.isnan(pts)):
        raise DomainError("evaluation points must lie in the unit square")
    return pts


def to_normal_scores(pts):
    """Normal quantiles of points in [0, 1], clamped to +-Z_CLAMP."""
    lo = gaussian_cdf(-Z_CLAMP)
    return gaussian_quantile(np.clip(pts, lo, 1.0 - lo))


def _log_phi(x):
    return -0.5 * x * x - 0.5 * _LOG_2PI


def _chunks(k, per_row_cost, budget=4_000_000):
    size = max(1, budget // max(1, per_row_cost))
    for start in range(0, k, size):
        yield slice(start, min(k, start + size))


# ---------------------------------------------------------------------------
# mirror reflection and beta kernels


def reflect_data(s):
    """Nine mirror images of every observation, stacked image by image.

    Rows ``k*n : (k+1)*n`` hold image ``k``; the first ``n`` rows are the
    original sample.
    """
    u, v = as_sample(s).points.T
    images = [
        (u, v), (-u, v), (u, -v), (-u, -v), (u, 2 - v),
        (-u, 2 - v), (2 - u, v), (2 - u, -v), (2 - u, 2 - v),
    ]  # fmt: skip
    return np.concatenate([np.column_stack(im) for im in images])


def _mr_axis_kernel(x, data, b):
    """Reflected Gaussian kernel along one axis, broadcasting `x` against `data`.

    The nine images of a point are the product set {U, -U, 2-U} x {V, -V, 2-V},
    so the estimator factorizes into per-axis sums over three images.
    """
    out = 0.0
    for image in (data, -data, 2.0 - data):
        d = (x - image) / b
        out = out + np.exp(-0.5 * d * d)
    return out / (b * math.sqrt(2.0 * math.pi))


def _beta_axis_kernel(x, data, b):
    return beta_density(data, x / b + 1.0, (1.0 - x) / b + 1.0)


_AXIS_KERNELS = {Method.MR: _mr_axis_kernel, Method.BETA: _beta_axis_kernel}


def _product_estimate(method, s, b, pts):
    kern = _AXIS_KERNELS[method]
    u, v = s.points.T
    out = np.empty(pts.shape[0])
    for sl in _chunks(pts.shape[0], 3 * s.n):
        ku = kern(pts[sl, 0, None], u[None, :], b)
        out[sl] = np.mean(ku * kern(pts[sl, 1, None], v[None, :], b), axis=1)
    return out


def eval_mr(s, bw, pts):
    """Mirror-reflection estimate at `pts`."""
    s, pts = as_sample(s), _check_points(pts)
    bw.check_for(Method.MR)
    return _product_estimate(Method.MR, s, bw.scalar_b, pts)


def eval_beta(s, bw, pts):
    """Beta-kernel estimate at `pts`."""
    s, pts = as_sample(s), _check_points(pts)
    bw.check_for(Method.BETA)
    return _product_estimate(Method.BETA, s, bw.scalar_b, pts)


# ---------------------------------------------------------------------------
# normal-scores kernel estimates


def _inverse_and_logdet(mat):
    """Inverse and log|det| of a stack of 2x2 matrices."""
    mat = np.asarray(mat, dtype=float)
    a, b, c, d = mat[..., 0, 0], mat[..., 0, 1], mat[..., 1, 0], mat[..., 1, 1]
    det = a * d - b * c
    if np.any(~(np.abs(det) > 1e-300)) or not np.all(np.isfinite(det)):
        raise InvalidBandwidthError("bandwidth matrix is singular")
    inv = np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2) / det[..., None, None]
    return inv, np.log(np.abs(det))


def _standardized(x, zdata, binv):
    """``B^{-1} (Z_i - x)`` for every point and datum, shape (k, n, 2)."""
    diff = zdata[None, :, :] - x[:, None, :]
    if binv.ndim == 2:
        return diff @ binv.T
    return np.einsum("kab,knb->kna", binv, diff)


def _local_log_weights(x, zdata, binv, logdet):
    """Log kernel weights ``log(K_B(Z_i - x) / n)`` and the standardized data."""
    zs = _standardized(x, zdata, binv)
    logw = -0.5 * np.sum(zs * zs, axis=-1) - _LOG_2PI - np.reshape(logdet, (-1, 1))
    return logw - math.log(zdata.shape[0]), zs


def _log_kde(x, zdata, binv, logdet):
    out = np.empty(x.shape[0])
    for sl in _chunks(x.shape[0], 3 * zdata.shape[0]):
        b = binv if binv.ndim == 2 else binv[sl]
        ld = logdet if np.ndim(logdet) == 0 else logdet[sl]
        logw, _ = _local_log_weights(x[sl], zdata, b, ld)
        out[sl] = special.logsumexp(logw, axis=1)
    return out


def _back_transform(log_f, x):
    return np.exp(log_f - _log_phi(x[:, 0]) - _log_phi(x[:, 1]))


def eval_transform(s, bw, pts):
    """Transformation estimator with a Gaussian kernel and bandwidth matrix ``B``."""
    s, pts = as_sample(s), _check_points(pts)
    bw.check_for(Method.T)
    binv, logdet = _inverse_and_logdet(bw.matrix_B)
    x = to_normal_scores(pts)
    return _back_transform(_log_kde(x, s.z, binv, logdet), x)


# ---------------------------------------------------------------------------
# local likelihood


def _basis(z, degree):
    z1, z2 = z[..., 0], z[..., 1]
    cols = [np.ones_like(z1)]
    if degree >= 1:
        cols += [z1, z2]
    if degree >= 2:
        cols += [0.5 * z1 * z1, z1 * z2, 0.5 * z2 * z2]
    return np.stack(cols, axis=-1)


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(3)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()
_GH_EPS = np.stack(np.meshgrid(_GH_NODES, _GH_NODES, indexing="ij"), -1).reshape(-1, 2)
_GH_W = np.outer(_GH_WEIGHTS, _GH_WEIGHTS).ravel()


def _kernel_integral(theta, degree):
    """Integral of ``phi_2(z) exp(P_theta(z))`` and the tilted-Gaussian moments.

    For a Gaussian kernel the integral is available in closed form; it is
    finite iff ``I - A`` is positive definite (A = quadratic part). The
    normalized density ``phi_2 exp(P) / J`` is Gaussian, so its moments of
    the basis functions (degree <= 4 products) are computed exactly by a
    3 x 3 Gauss-Hermite rule in its own frame.

    Returns ``(log_J, E[phi], E[phi phi^T], feasible)``.
    """
    k = theta.shape[0]
    a0 = theta[:, 0]
    b = theta[:, 1:3] if degree >= 1 else np.zeros((k, 2))
    m11 = np.ones(k)
    m12 = np.zeros(k)
    m22 = np.ones(k)
    if degree >= 2:
        m11 = m11 - theta[:, 3]
        m12 = m12 - theta[:, 4]
        m22 = m22 - theta[:, 5]
    with np.errstate(over="ignore", invalid="ignore"):
        det = m11 * m22 - m12 * m12
    feasible = (m11 > 1e-12) & (det > 1e-12) & np.all(np.isfinite(theta), axis=1)
    det = np.where(feasible, det, 1.0)
    m11f, m12f, m22f = (np.where(feasible, m, d) for m, d in ((m11, 1.0), (m12, 0.0), (m22, 1.0)))
    # covariance of the tilted Gaussian = M^{-1}
    s11, s12, s22 = m22f / det, -m12f / det, m11f / det
    mu = np.stack([s11 * b[:, 0] + s12 * b[:, 1], s12 * b[:, 0] + s22 * b[:, 1]], -1)
    with np.errstate(over="ignore", invalid="ignore"):
        log_j = a0 + 0.5 * np.sum(b * mu, axis=1) - 0.5 * np.log(det)
    l11 = np.sqrt(s11)
    l21 = s12 / l11
    l22 = np.sqrt(np.clip(s22 - l21 * l21, 0.0, None))
    nodes = np.empty((k, _GH_EPS.shape[0], 2))
    nodes[..., 0] = mu[:, None, 0] + l11[:, None] * _GH_EPS[:, 0]
    nodes[..., 1] = mu[:, None, 1] + l21[:, None] * _GH_EPS[:, 0] + l22[:, None] * _GH_EPS[:, 1]
    # nearly singular tilts (rejected by the line search) can overflow here
    with np.errstate(over="ignore", invalid="ignore"):
        phi = _basis(nodes, degree)
        mean = np.einsum("q,kqp->kp", _GH_W, phi)
        second = np.einsum("q,kqp,kqr->kpr", _GH_W, phi, phi)
    return np.where(feasible, log_j, np.inf), mean, second, feasible


def _objective(theta, target, degree):
    log_j, _, _, feasible = _kernel_integral(theta, degree)
    with np.errstate(over="ignore"):
        val = np.sum(theta * target, axis=1) - np.exp(log_j)
    return np.where(feasible, val, -np.inf)


def _moment_start(target, degree):
    """Starting coefficients whose tilted Gaussian matches the weighted mean
    (and covariance, for degree 2) of the data. Rows with an ill-conditioned
    weighted covariance start from the kernel density estimate instead."""
    k, p = target.shape
    theta = np.zeros((k, p))
    if degree == 0:
        return theta
    m = target[:, 1:3]
    if degree == 1:
        theta[:, 0] = -0.5 * np.sum(m * m, axis=1)
        theta[:, 1:3] = m
        return theta
    c11 = 2.0 * target[:, 3] - m[:, 0] ** 2
    c12 = target[:, 4] - m[:, 0] * m[:, 1]
    c22 = 2.0 * target[:, 5] - m[:, 1] ** 2
    det = c11 * c22 - c12 * c12
    good = (c11 > 1e-8) & (c22 > 1e-8) & (det > 1e-8 * c11 * c22)
    det = np.where(good, det, 1.0)
    i11, i12, i22 = c22 / det, -c12 / det, c11 / det
    b1 = i11 * m[:, 0] + i12 * m[:, 1]
    b2 = i12 * m[:, 0] + i22 * m[:, 1]
    a0 = -0.5 * np.log(det) - 0.5 * (m[:, 0] * b1 + m[:, 1] * b2)
    start = np.stack([a0, b1, b2, 1.0 - i11, -i12, 1.0 - i22], axis=1)
    theta[good] = start[good]
    return theta


def _solve_rows(h, g):
    """Solve the stacked systems ``h x = g``; singular rows give NaN."""
    try:
        return np.linalg.solve(h, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.full(g.shape, np.nan)
        for i, (hh, gg) in enumerate(zip(h, g)):
            try:
                out[i] = np.linalg.solve(hh, gg)
            except np.linalg.LinAlgError:
                pass
        return out


def _newton_local_likelihood(target, degree, start=None):
    """Maximize ``theta . target - J(theta)`` for every row of `target`.

    `target` holds the normalized kernel-weighted basis means of the data,
    so the log-density at the fitting point is ``theta[0]`` plus the log of
    the kernel-weight total. Iterations start from `start` (default: the
    moment-matched point). Returns ``(theta, converged, hessian)``.
    """
    k, p = target.shape
    theta = _moment_start(target, degree) if start is None else np.array(start, dtype=float)
    converged = np.zeros(k, dtype=bool)
    hess = np.zeros((k, p, p))
    active = np.ones(k, dtype=bool)
    for _ in range(NEWTON_MAX_ITER + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        th = theta[idx]
        with np.errstate(over="ignore", invalid="ignore"):  # diverging iterates end in the fallback
            log_j, mean, second, _ = _kernel_integral(th, degree)
            jv = np.exp(log_j)
        grad = target[idx] - jv[:, None] * mean
        h = jv[:, None, None] * second
        hess[idx] = h
        done = np.max(np.abs(grad), axis=1) <= NEWTON_GTOL
        converged[idx[done]] = True
        active[idx[done]] = False
        if np.all(done):
            break
        idx, th, grad, h = idx[~done], th[~done], grad[~done], h[~done]
        # overflowing or singular systems cannot be iterated further
        sane = np.all(np.isfinite(h), axis=(1, 2)) & np.all(np.isfinite(grad), axis=1)
        active[idx[~sane]] = False
        idx, th, grad, h = idx[sane], th[sane], grad[sane], h[sane]
        if idx.size == 0:
            break
        step = _solve_rows(h, grad)
        stuck = ~np.all(np.isfinite(step), axis=1)
        active[idx[stuck]] = False
        idx, th, step = idx[~stuck], th[~stuck], step[~stuck]
        if idx.size == 0:
            break
        base = np.sum(th * target[idx], axis=1) - np.exp(_kernel_integral(th, degree)[0])
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        new = th.copy()
        for _ in range(_MAX_HALVINGS):
            cand = th[pending] + t[pending, None] * step[pending]
            val = _objective(cand, target[idx[pending]], degree)
            ok = val >= base[pending] - 1e-14 * np.abs(base[pending])
            sel = np.flatnonzero(pending)
            new[sel[ok]] = cand[ok]
            pending[sel[ok]] = False
            t[pending] *= 0.5
            if not np.any(pending):
                break
        # a row that could not improve is stuck; stop iterating it
        active[idx[pending]] = False
        theta[idx] = new
    return theta, converged, hess


def _nn_matrices(x, zdata, alpha, shape, mult):
    """Per-point bandwidth matrices ``h(x) * shape`` (times `mult`), where
    ``h(x)`` is the distance from ``x`` to its ceil(alpha n)-th nearest
    neighbour measured in the frame whitened by `shape`."""
    n = zdata.shape[0]
    kth = max(1, math.ceil(alpha * n)) - 1
    sinv, _ = _inverse_and_logdet(shape)
    white = zdata @ sinv.T
    xw = x @ sinv.T
    h = np.empty(x.shape[0])
    for sl in _chunks(x.shape[0], n):
        d2 = np.sum((xw[sl, None, :] - white[None, :, :]) ** 2, axis=-1)
        h[sl] = np.sqrt(np.partition(d2, kth, axis=1)[:, kth])
    h = np.maximum(h, 1e-8)
    return mult * h[:, None, None] * shape[None]


def _local_bandwidths(s, bw, method, x):
    """Kernel (standard deviation) matrices for every fitting point."""
    if method.nearest_neighbor:
        radius = _nn_matrices(x, s.z, bw.nn_alpha, bw.shape, bw.mult)
    else:
        radius = np.broadcast_to(bw.matrix_B, (x.shape[0], 2, 2))
    return TLL_KERNEL_SCALE * radius


def _tll_fit(s, bw, method, x, degree=None):
    """Local likelihood fits at normal-scores points `x`.

    Returns ``(log_f, converged, influence)`` where ``influence`` is the
    derivative of ``log_f`` with respect to the weight of a datum placed at
    the fitting point itself.
    """
    degree = method.degree if degree is None else degree
    mats = _local_bandwidths(s, bw, method, x)
    binv, logdet = _inverse_and_logdet(mats)
    k = x.shape[0]
    p = _basis(np.zeros(2), degree).shape[-1]
    log_f = np.empty(k)
    converged = np.empty(k, dtype=bool)
    influence = np.empty(k)
    for sl in _chunks(k, 8 * s.n):
        logw, zs = _local_log_weights(x[sl], s.z, binv[sl], logdet[sl])
        log_total = special.logsumexp(logw, axis=1)
        w = np.exp(logw - log_total[:, None])
        target = np.einsum("kn,knp->kp", w, _basis(zs, degree))
        theta, ok, hess = _newton_local_likelihood(target, degree)
        log_f[sl] = np.where(ok, theta[:, 0] + log_total, log_total)
        converged[sl] = ok
        hinv00 = np.ones(theta.shape[0])
        if np.any(ok):
            # pinv: a converged but nearly flat fit can still have a singular Hessian
            hinv00[ok] = np.linalg.pinv(hess[ok], hermitian=True)[:, 0, 0]
        log_self = -_LOG_2PI - logdet[sl] - math.log(s.n)
        with np.errstate(over="ignore"):
            influence[sl] = np.exp(log_self - log_total) * hinv00
    return log_f, converged, influence


def eval_tll(s, bw, degree, nn, pts, return_failures=False):
    """Transformation local-likelihood estimate (log-linear or log-quadratic).

    Points where the Newton iterations do not converge fall back to the
    kernel density estimate with the same local bandwidth; their number is
    reported through a :class:`TLLConvergenceWarning` (and returned when
    ``return_failures`` is set).
    """
    if degree not in (0, 1, 2):
        raise InvalidParameterError("degree must be 0, 1 or 2")
    s, pts = as_sample(s), _check_points(pts)
    method = {(1, False): Method.TLL1, (2, False): Method.TLL2,
              (1, True): Method.TLL1NN, (2, True): Method.TLL2NN,
              (0, False): Method.TLL1, (0, True): Method.TLL1NN}[(degree, bool(nn))]  # fmt: skip
    bw.check_for(method)
    x = to_normal_scores(pts)
    log_f, ok, _ = _tll_fit(s, bw, method, x, degree=degree)
    failures = int(np.sum(~ok))
    if failures:
        warnings.warn(
            f"local likelihood did not converge at {failures} point(s); "
            "kernel estimate used there",
            TLLConvergenceWarning,
            stacklevel=2,
        )
    out = _back_transform(log_f, x)
    return (out, failures) if return_failures else out


def tll_fallback(s, bw, nn, pts):
    """The kernel density estimate TLL falls back to (same local bandwidths)."""
    s, pts = as_sample(s), _check_points(pts)
    method = Method.TLL1NN if nn else Method.TLL1
    x = to_normal_scores(pts)
    binv, logdet = _inverse_and_logdet(_local_bandwidths(s, bw, method, x))
    return _back_transform(_log_kde(x, s.z, binv, logdet), x)


# ---------------------------------------------------------------------------
# bandwidth selection


def bandwidth_rot_t(s, mult=1.0):
    """Normal reference rule ``n^{-1/6} Sigma_Z^{1/2}`` (times `mult`)."""
    s = as_sample(s)
    return mult * s.n ** (-1.0 / 6.0) * cov_sqrt(s.z)


def bandwidth_rot_tll(s, degree, mult=1.0):
    """Rule of thumb ``3 n^{-1/(4 q* + 2)} Sigma_Z^{1/2}``, ``q* = 1 + floor(q/2)``."""
    if degree not in (1, 2):
        raise InvalidParameterError("degree must be 1 or 2")
    s = as_sample(s)
    qstar = 1 + degree // 2
    return mult * 3.0 * s.n ** (-1.0 / (4 * qstar + 2)) * cov_sqrt(s.z)


def nn_shape(s):
    """Square root of the normal-scores covariance scaled to unit determinant."""
    root = cov_sqrt(as_sample(s).z)
    return root / math.sqrt(np.linalg.det(root))


def _first_principal_scores(z):
    cov = np.cov(z, rowvar=False)
    _, vecs = np.linalg.eigh(cov)
    return (z - z.mean(axis=0)) @ vecs[:, -1]


def _nn_distances(points, y, ks, exclude_self=False):
    """Distance from every point to its k-th nearest datum, for each k in `ks`.

    With ``exclude_self`` the points are the data themselves and the zero
    self-distance is skipped. Shape ``(len(points), len(ks))``.
    """
    n = y.size
    offset = 1 if exclude_self else 0
    kth = np.minimum(np.asarray(ks) - 1 + offset, n - 1)
    out = np.empty((points.size, kth.size))
    for sl in _chunks(points.size, n):
        d = np.abs(points[sl, None] - y[None, :])
        out[sl] = np.partition(d, np.unique(kth), axis=1)[:, kth]
    return out


def _nn_kde_sums(points, y, sd, exclude_self=False):
    """``sum_j phi((points_i - y_j) / sd_i)`` for every point and bandwidth
    column of `sd` (shape ``(len(points), n_bandwidths)``)."""
    out = np.empty(sd.shape)
    for sl in _chunks(points.size, y.size * 4):
        d = points[sl, None] - y[None, :]
        for a in range(sd.shape[1]):
            r = d / sd[sl, a, None]
            out[sl, a] = np.exp(-0.5 * r * r).sum(axis=1)
            if exclude_self:
                out[sl, a] -= 1.0
    return out / math.sqrt(2.0 * math.pi)


def lscv_alpha_scores(y, alphas=ALPHA_GRID, grid_size=512):
    """Univariate least-squares CV scores of a nearest-neighbour Gaussian KDE.

    For candidate ``alpha`` the kernel sd at ``t`` is ``TLL_KERNEL_SCALE``
    times the distance from ``t`` to its ceil(alpha n)-th nearest datum.
    The score is ``int f^2 - 2/n sum_i f_{-i}(y_i)``.
    """
    y = np.sort(np.asarray(y, dtype=float))
    n = y.size
    ks = np.array([max(1, math.ceil(a * n)) for a in alphas])
    span = y[-1] - y[0]
    grid = np.linspace(y[0] - 0.5 * span, y[-1] + 0.5 * span, grid_size)
    dx = grid[1] - grid[0]

    h_grid = np.maximum(TLL_KERNEL_SCALE * _nn_distances(grid, y, ks), 1e-12)
    dens = _nn_kde_sums(grid, y, h_grid) / (n * h_grid)
    integral = np.sum(dens * dens, axis=0) * dx

    h_loo = np.maximum(TLL_KERNEL_SCALE * _nn_distances(y, y, ks, exclude_self=True), 1e-12)
    loo = _nn_kde_sums(y, y, h_loo, exclude_self=True) / ((n - 1) * h_loo)
    return integral - 2.0 * np.mean(loo, axis=0)


def select_alpha_lscv(s, degree=2):
    """Nearest-neighbour fraction by LSCV on the first principal component
    of the normal scores. The same rule serves both polynomial degrees."""
    if degree not in (1, 2):
        raise InvalidParameterError("degree must be 1 or 2")
    s = as_sample(s)
    if s.n < 20:
        raise InvalidParameterError("alpha selection needs at least 20 observations")
    scores = lscv_alpha_scores(_first_principal_scores(s.z))
    if not np.any(np.isfinite(scores)) or np.ptp(scores[np.isfinite(scores)]) == 0.0:
        warnings.warn("LSCV scores degenerate; using alpha = 0.35", RuntimeWarning, stacklevel=2)
        return FALLBACK_ALPHA
    return float(ALPHA_GRID[np.nanargmin(np.where(np.isfinite(scores), scores, np.nan))])


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(128)
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


class _AxisKernelCache:
    """Bandwidth-independent pieces of the per-axis kernel matrices used by
    cross-validation: squared image distances (MR) or log-data (BETA)."""

    def __init__(self, method, x, data):
        self.method = method
        x = np.asarray(x, dtype=float)
        if method is Method.MR:
            self.sq = [(x[:, None] - img[None, :]) ** 2 for img in (data, -data, 2.0 - data)]
        else:
            self.x = x
            self.logd = np.log(data)[None, :]
            self.log1md = np.log1p(-data)[None, :]

    def matrix(self, b):
        if self.method is Method.MR:
            out = np.exp(-0.5 / (b * b) * self.sq[0])
            out += np.exp(-0.5 / (b * b) * self.sq[1])
            out += np.exp(-0.5 / (b * b) * self.sq[2])
            return out / (b * math.sqrt(2.0 * math.pi))
        x = self.x[:, None]
        lognorm = special.betaln(x / b + 1.0, (1.0 - x) / b + 1.0)
        return np.exp(x / b * self.logd + (1.0 - x) / b * self.log1md - lognorm)


def lscv_scalar_scores(s, method, bandwidths):
    """Bivariate least-squares CV scores of MR or BETA for each bandwidth."""
    method = Method.parse(method)
    s = as_sample(s)
    u, v = s.points.T
    n = s.n
    grid_u = _AxisKernelCache(method, _GL_NODES, u)
    grid_v = _AxisKernelCache(method, _GL_NODES, v)
    integral = np.empty(len(bandwidths))
    for i, b in enumerate(bandwidths):
        on_grid = grid_u.matrix(b) @ grid_v.matrix(b).T / n
        integral[i] = _GL_WEIGHTS @ (on_grid * on_grid) @ _GL_WEIGHTS
    loo = np.zeros(len(bandwidths))
    for sl in _chunks(n, 4 * n):
        pair_u = _AxisKernelCache(method, u[sl], u)
        pair_v = _AxisKernelCache(method, v[sl], v)
        rows = np.arange(sl.stop - sl.start)
        for i, b in enumerate(bandwidths):
            prod = pair_u.matrix(b)
            prod *= pair_v.matrix(b)
            loo[i] += prod.sum() - prod[rows, rows + sl.start].sum()
    return integral - 2.0 * loo / (n * (n - 1))


def select_bw_lscv_scalar(s, method, mult=1.0):
    """Scalar bandwidth for MR or BETA by least-squares cross-validation
    over ``kappa * n^{-1/6}``; candidates above 1 are skipped."""
    method = Method.parse(method)
    if not method.scalar_bandwidth:
        raise InvalidParameterError("scalar LSCV applies to MR and BETA only")
    s = as_sample(s)
    if s.n < 20:
        raise InvalidParameterError("bandwidth selection needs at least 20 observations")
    base = s.n ** (-1.0 / 6.0)
    cands = KAPPA_GRID * base
    cands = cands[cands <= 1.0]
    with np.errstate(all="ignore"):
        scores = lscv_scalar_scores(s, method, cands) if cands.size else np.array([])
    if cands.size == 0 or not np.any(np.isfinite(scores)):
        return mult * base / 2.0
    return mult * float(cands[np.nanargmin(np.where(np.isfinite(scores), scores, np.nan))])


def select_bandwidth(s, method, mult=1.0):
    """Automatic bandwidth for `method`."""
    method = Method.parse(method)
    s = as_sample(s)
    if method.scalar_bandwidth:
        return BandwidthSpec(scalar_b=select_bw_lscv_scalar(s, method, mult), mult=mult)
    if method is Method.T:
        return BandwidthSpec(matrix_B=bandwidth_rot_t(s, mult), mult=mult)
    if method.nearest_neighbor:
        alpha = select_alpha_lscv(s, method.degree)
        return BandwidthSpec(nn_alpha=alpha, shape=nn_shape(s), mult=mult)
    return BandwidthSpec(matrix_B=bandwidth_rot_tll(s, method.degree, mult), mult=mult)


# ---------------------------------------------------------------------------
# dispatch


def evaluate(s, method, bw, pts, return_failures=False):
    """Raw density of `method` at `pts`."""
    method = Method.parse(method)
    s = as_sample(s)
    if method is Method.MR:
        out, fails = eval_mr(s, bw, pts), 0
    elif method is Method.BETA:
        out, fails = eval_beta(s, bw, pts), 0
    elif method is Method.T:
        out, fails = eval_transform(s, bw, pts), 0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TLLConvergenceWarning)
            out, fails = eval_tll(s, bw, method.degree, method.nearest_neighbor, pts, return_failures=True)
    return (out, fails) if return_failures else out


def self_influence(s, method, bw):
    """Influence of every observation on the estimate at its own location.

    For linear smoothers this is the diagonal of the smoother matrix; the
    sum is used as the effective number of parameters.
    """
    method = Method.parse(method)
    s = as_sample(s)
    if method.scalar_bandwidth:
        kern = _AXIS_KERNELS[method]
        u, v = s.points.T
        est = _product_estimate(method, s, bw.scalar_b, s.points)
        own = kern(u, u, bw.scalar_b) * kern(v, v, bw.scalar_b)
        return own / (s.n * est)
    if method is Method.T:
        binv, logdet = _inverse_and_logdet(bw.matrix_B)
        log_f = _log_kde(s.z, s.z, binv, logdet)
        return np.exp(-_LOG_2PI - logdet - math.log(s.n) - log_f)
    _, _, infl = _tll_fit(s, bw, method, s.z)
    return infl
