"""Cubic interpolation of density values on a Gaussian-spaced knot grid.

A fitted copula density is stored as its values on the tensor grid
``knots x knots``. Between knots it is interpolated by piecewise cubics
whose end-point derivatives come from a three-point finite-difference
scheme; the two outermost pieces are extrapolated to the borders of
[0, 1]. Integrals of the interpolant are exact (quartic antiderivatives),
which makes the iterative renormalization to uniform margins cheap.

Segments are addressed by the zero-based index ``j`` of their left knot,
``1 <= j <= m - 3``. Every segment polynomial is written in the local
coordinate ``s = (u - p[j]) / (p[j + 1] - p[j])``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from kercop.errors import (
    DegenerateFieldError,
    DomainError,
    InvalidParameterError,
    SegmentIndexError,
)
from kercop.numcore import gaussian_cdf

DEFAULT_KNOTS = 30
DEFAULT_RENORM_ITERS = 3
MIN_KNOTS = 8

# powers used for polynomial evaluation / antiderivatives
_POW = np.arange(4)
_POW1 = np.arange(1, 5)


@dataclass(frozen=True, eq=False)
class KnotVector:
    """Strictly increasing knots ``p[0] < ... < p[m-1]`` inside [0, 1]."""

    knots: np.ndarray

    def __post_init__(self):
        p = np.array(self.knots, dtype=float)
        if p.ndim != 1 or p.size < MIN_KNOTS:
            raise InvalidParameterError(f"need at least {MIN_KNOTS} knots")
        if np.any(np.diff(p) <= 0) or p[0] < 0.0 or p[-1] > 1.0:
            raise InvalidParameterError("knots must be strictly increasing in [0, 1]")
        p.setflags(write=False)
        object.__setattr__(self, "knots", p)

    @property
    def m(self):
        return self.knots.size

    @property
    def n_segments(self):
        return self.m - 3

    @cached_property
    def width(self):
        """Width of every segment, shape (m - 3,)."""
        p = self.knots
        return p[2:-1] - p[1:-2]

    @cached_property
    def s_bounds(self):
        """Local-coordinate limits of the region each segment covers.

        Interior segments cover ``s in [0, 1]``; the first and last ones are
        stretched to reach 0 and 1 in the original coordinate.
        """
        lo = np.zeros(self.n_segments)
        hi = np.ones(self.n_segments)
        p, h = self.knots, self.width
        lo[0] = -p[1] / h[0]
        hi[-1] = (1.0 - p[-3]) / h[-1]
        return lo, hi

    @cached_property
    def stencil_operator(self):
        """Array G of shape (m - 3, 4, 4) with ``a[c] = sum_r G[j, c, r] * y[j - 1 + r]``."""
        p = self.knots
        pm, p0, p1, p2 = p[:-3], p[1:-2], p[2:-1], p[3:]
        nseg = self.n_segments
        eye = np.eye(4)
        # derivative weights of d0, d1 as functions of the 4 stencil values
        d0 = (
            (eye[1] - eye[0])[None] / (p0 - pm)[:, None]
            - (eye[2] - eye[0])[None] / (p1 - pm)[:, None]
            + (eye[2] - eye[1])[None] / (p1 - p0)[:, None]
        )
        d1 = (
            (eye[2] - eye[1])[None] / (p1 - p0)[:, None]
            - (eye[3] - eye[1])[None] / (p2 - p0)[:, None]
            + (eye[3] - eye[2])[None] / (p2 - p1)[:, None]
        )
        h = (p1 - p0)[:, None]
        c0 = np.broadcast_to(eye[1], (nseg, 4))
        c1 = np.broadcast_to(eye[2], (nseg, 4))
        g = np.empty((nseg, 4, 4))
        g[:, 0] = c0
        g[:, 1] = h * d0
        g[:, 2] = -3.0 * c0 + 3.0 * c1 - 2.0 * h * d0 - h * d1
        g[:, 3] = 2.0 * c0 - 2.0 * c1 + h * d0 + h * d1
        g.setflags(write=False)
        return g

    @cached_property
    def _cumulative_weights(self):
        """Dense weights (m - 2, m): row j integrates the interpolant over
        [0, left end of segment j] (row 0 is zero, last row is [0, 1])."""
        lo, hi = self.s_bounds
        g = self.stencil_operator
        anti = (hi[:, None] ** _POW1 - lo[:, None] ** _POW1) / _POW1  # (nseg, 4)
        seg = self.width[:, None] * np.einsum("jc,jcr->jr", anti, g)
        dense = np.zeros((self.n_segments, self.m))
        for j in range(self.n_segments):
            dense[j, j : j + 4] = seg[j]
        cum = np.zeros((self.n_segments + 1, self.m))
        cum[1:] = np.cumsum(dense, axis=0)
        return cum

    def locate(self, u):
        """Segment row index (zero based, into ``stencil_operator``) and
        local coordinate of every point in `u`."""
        u = np.asarray(u, dtype=float)
        if np.any((u < 0.0) | (u > 1.0)) or np.any(np.isnan(u)):
            raise DomainError("evaluation points must lie in [0, 1]")
        j = np.searchsorted(self.knots, u, side="right") - 1
        j = np.clip(j, 1, self.m - 3)
        s = (u - self.knots[j]) / (self.knots[j + 1] - self.knots[j])
        return j - 1, s


def make_knots(m=DEFAULT_KNOTS):
    """Gaussian cdf image of ``m`` equidistant points on [-3, 3]."""
    if m < MIN_KNOTS:
        raise InvalidParameterError(f"need at least {MIN_KNOTS} knots, got {m}")
    return KnotVector(gaussian_cdf(np.linspace(-3.0, 3.0, m)))


@dataclass(frozen=True)
class SegmentPoly:
    """Cubic ``a0 + a1*s + a2*s**2 + a3*s**3`` with ``s = (u - origin) / width``."""

    a0: float
    a1: float
    a2: float
    a3: float
    origin: float
    width: float

    def __call__(self, u):
        s = (np.asarray(u, dtype=float) - self.origin) / self.width
        return self.a0 + s * (self.a1 + s * (self.a2 + s * self.a3))

    def derivative(self, u):
        s = (np.asarray(u, dtype=float) - self.origin) / self.width
        return (self.a1 + s * (2.0 * self.a2 + 3.0 * s * self.a3)) / self.width


def spline_coeffs_1d(values, knots, j):
    """Cubic piece between knots ``j`` and ``j + 1`` (one based, 2 <= j <= m - 2)."""
    values = np.asarray(values, dtype=float)
    if not 2 <= j <= knots.m - 2:
        raise SegmentIndexError(f"segment index {j} outside [2, {knots.m - 2}]")
    row = j - 2
    a = knots.stencil_operator[row] @ values[j - 2 : j + 2]
    return SegmentPoly(*map(float, a), origin=knots.knots[j - 1], width=knots.width[row])


def segment_coeffs(values, knots):
    """Coefficients of every piece, shape ``values.shape[:-1] + (m - 3, 4)``."""
    windows = sliding_window_view(np.asarray(values, dtype=float), 4, axis=-1)
    return np.einsum("...jr,jcr->...jc", windows, knots.stencil_operator)


def stencil_weights(knots, u):
    """Sparse interpolation weights: knot indices and weights, both ``u.shape + (4,)``."""
    row, s = knots.locate(u)
    idx = row[..., None] + _POW
    w = np.einsum("...c,...cr->...r", s[..., None] ** _POW, knots.stencil_operator[row])
    return idx, w


def _gather(values, idx):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        return values[idx]
    shape = np.broadcast_shapes(values.shape[:-1], idx.shape[:-1])
    return np.take_along_axis(
        np.broadcast_to(values, shape + values.shape[-1:]),
        np.broadcast_to(idx, shape + idx.shape[-1:]),
        axis=-1,
    )


def interp_1d(values, knots, u):
    """Evaluate the piecewise cubic through `values` at `u`.

    `values` may carry leading batch dimensions that broadcast against `u`.
    """
    idx, w = stencil_weights(knots, u)
    return np.sum(_gather(values, idx) * w, axis=-1)


def integral_weights(knots, t):
    """Dense weights, shape ``t.shape + (m,)``, such that ``weights @ values``
    is the integral of the interpolant over ``[0, t]``."""
    row, s = knots.locate(t)
    lo, _ = knots.s_bounds
    anti = (s[..., None] ** _POW1 - lo[row][..., None] ** _POW1) / _POW1
    part = knots.width[row][..., None] * np.einsum(
        "...c,...cr->...r", anti, knots.stencil_operator[row]
    )
    out = knots._cumulative_weights[row].copy()
    idx = row[..., None] + _POW
    np.put_along_axis(out, idx, np.take_along_axis(out, idx, axis=-1) + part, axis=-1)
    return out


def _polyval(coefs, s):
    return coefs[..., 0] + s * (coefs[..., 1] + s * (coefs[..., 2] + s * coefs[..., 3]))


def _antideriv(coefs, s):
    return s * (
        coefs[..., 0]
        + s * (coefs[..., 1] / 2.0 + s * (coefs[..., 2] / 3.0 + s * coefs[..., 3] / 4.0))
    )


def _positive_part_integral(coefs, sa, sb, iters=60):
    """Exact integral of ``max(p(s), 0)`` over ``[sa, sb]`` for cubics ``p``.

    The interval is split at the critical points of ``p`` into monotone
    pieces; a piece that changes sign is cut at its root (found by
    bisection), so only the nonnegative parts are integrated.
    """
    coefs, sa, sb = np.broadcast_arrays(coefs, np.asarray(sa, float)[..., None], np.asarray(sb, float)[..., None])
    sa, sb = sa[..., 0], sb[..., 0]
    a1, a2, a3 = coefs[..., 1], coefs[..., 2], coefs[..., 3]
    # critical points: roots of a1 + 2 a2 s + 3 a3 s^2
    qa, qb, qc = 3.0 * a3, 2.0 * a2, a1
    disc = qb * qb - 4.0 * qa * qc
    sq = np.sqrt(np.clip(disc, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        big = np.abs(qa) > 1e-14 * (np.abs(qb) + np.abs(qc) + 1e-300)
        r1 = np.where(big, (-qb - sq) / (2.0 * qa), -qc / qb)
        r2 = np.where(big, (-qb + sq) / (2.0 * qa), -qc / qb)
    valid = disc >= 0.0
    r1 = np.where(valid & np.isfinite(r1), r1, sa)
    r2 = np.where(valid & np.isfinite(r2), r2, sa)
    brk = np.sort(np.stack([sa, np.clip(r1, sa, sb), np.clip(r2, sa, sb), sb], axis=-1), axis=-1)
    vals = _polyval(coefs[..., None, :], brk)
    total = np.zeros(sa.shape)
    for k in range(3):
        left, right = brk[..., k], brk[..., k + 1]
        pl, pr = vals[..., k], vals[..., k + 1]
        both = (pl >= 0.0) & (pr >= 0.0)
        cross = (pl < 0.0) != (pr < 0.0)
        full = _antideriv(coefs, right) - _antideriv(coefs, left)
        piece = np.where(both, full, 0.0)
        if np.any(cross):
            c = coefs[cross]
            lo_, hi_ = left[cross].copy(), right[cross].copy()
            rising = pr[cross] >= 0.0
            for _ in range(iters):
                mid = 0.5 * (lo_ + hi_)
                pos = _polyval(c, mid) >= 0.0
                go_left = pos == rising
                hi_ = np.where(go_left, mid, hi_)
                lo_ = np.where(go_left, lo_, mid)
            root = 0.5 * (lo_ + hi_)
            part = np.where(
                rising,
                _antideriv(c, right[cross]) - _antideriv(c, root),
                _antideriv(c, root) - _antideriv(c, left[cross]),
            )
            piece[cross] = np.clip(part, 0.0, None)
        total = total + piece
    return total


def segment_positive_integrals(values, knots):
    """Integral of the floored interpolant over each segment's region,
    shape ``values.shape[:-1] + (m - 3,)``."""
    coefs = segment_coeffs(values, knots)
    lo, hi = knots.s_bounds
    return knots.width * _positive_part_integral(coefs, lo, hi)


def integrate_1d(values, knots, t=1.0, floor=False):
    """Integral of the interpolant through `values` over ``[0, t]``.

    With ``floor=True`` negative excursions of the cubic pieces are
    replaced by zero before integrating.
    """
    values = np.asarray(values, dtype=float)
    t = np.asarray(t, dtype=float)
    if not floor:
        w = integral_weights(knots, t)
        return np.sum(w * values, axis=-1)
    row, s = knots.locate(t)
    lo, hi = knots.s_bounds
    coefs = segment_coeffs(values, knots)  # (..., nseg, 4)
    # limit every segment's upper end at t
    upper = np.where(
        np.arange(knots.n_segments) < row[..., None],
        hi,
        np.where(np.arange(knots.n_segments) == row[..., None], s[..., None], lo),
    )
    parts = knots.width * _positive_part_integral(coefs, lo, np.maximum(upper, lo))
    return np.sum(parts, axis=-1)


@dataclass(frozen=True, eq=False)
class SplineField:
    """Density values on the tensor grid: ``values[j, k]`` sits at ``(p[j], p[k])``."""

    knots: KnotVector
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        m = self.knots.m
        if v.shape != (m, m):
            raise InvalidParameterError(f"field values must have shape ({m}, {m})")
        if not np.all(np.isfinite(v)) or np.any(v < 0.0):
            raise InvalidParameterError("field values must be finite and nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _check_points(pts):
    pts = np.asarray(pts, dtype=float)
    if pts.shape[-1] != 2:
        raise DomainError("points must have two coordinates")
    if np.any((pts < 0.0) | (pts > 1.0)) or np.any(np.isnan(pts)):
        raise DomainError("evaluation points must lie in the unit square")
    return pts


def interp_2d(field, pts):
    """Tensor-product interpolation: cubic pieces along ``u`` on the four
    knot rows around ``v``, then one cubic piece along ``v``."""
    pts = _check_points(pts)
    iu, wu = stencil_weights(field.knots, pts[..., 0])
    iv, wv = stencil_weights(field.knots, pts[..., 1])
    block = field.values[iu[..., :, None], iv[..., None, :]]  # (..., 4, 4)
    return np.einsum("...a,...ab,...b->...", wu, block, wv)


def margins(field):
    """Marginal integrals ``(M_u, M_v)`` of the floored interpolant at every knot."""
    v = field.values
    mu = segment_positive_integrals(v, field.knots).sum(axis=-1)
    mv = segment_positive_integrals(v.T, field.knots).sum(axis=-1)
    return mu, mv


def margin_deviation(field):
    """Largest deviation of the knot-wise marginal integrals from one."""
    mu, mv = margins(field)
    return float(max(np.max(np.abs(mu - 1.0)), np.max(np.abs(mv - 1.0))))


def total_mass(field):
    g = integral_weights(field.knots, np.array(1.0))
    return float(g @ field.values @ g)


def renormalize(field, iters=DEFAULT_RENORM_ITERS):
    """Iteratively divide the field by its marginal integrals.

    Each iteration divides every row by its integral ``M_u(p_j)`` and then
    every column of the result by its integral ``M_v(p_k)`` (integrals of
    the interpolant floored at zero). Applying the two divisions in turn
    rather than simultaneously avoids dividing a corner peak by both of its
    (shared) margins at once, which overshoots and can oscillate. A
    separable field is normalized exactly in one iteration.

    Raises
    ------
    DegenerateFieldError
        If a marginal integral is at most 1e-10.
    """
    if iters < 0:
        raise InvalidParameterError("iters must be nonnegative")
    knots = field.knots
    values = np.array(field.values)
    for _ in range(iters):
        mu = segment_positive_integrals(values, knots).sum(axis=-1)
        if np.min(mu) <= 1e-10:
            raise DegenerateFieldError("a row integral vanished during renormalization")
        values = values / mu[:, None]
        mv = segment_positive_integrals(values.T, knots).sum(axis=-1)
        if np.min(mv) <= 1e-10:
            raise DegenerateFieldError("a column integral vanished during renormalization")
        values = values / mv[None, :]
    return SplineField(knots, values)
