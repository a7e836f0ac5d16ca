"""Numerical primitives: Gaussian and beta densities, 2x2 matrix roots,
rank transforms and shifted Halton streams."""

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from kercop.errors import (
    DegenerateDataError,
    InfiniteQuantileError,
    InvalidParameterError,
)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def gaussian_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI)


def gaussian_cdf(x):
    return special.ndtr(np.asarray(x, dtype=float))


def gaussian_functions(x):
    """Return ``(pdf, cdf)`` of the standard normal at `x`."""
    return gaussian_pdf(x), gaussian_cdf(x)


def gaussian_quantile(p):
    """Standard normal quantile.

    Raises
    ------
    InfiniteQuantileError
        If any probability equals 0 or 1. Callers that evaluate on closed
        grids are expected to clamp first.
    """
    p = np.asarray(p, dtype=float)
    if np.any(np.isnan(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise InvalidParameterError("quantile argument must lie in (0, 1)")
    if np.any((p == 0.0) | (p == 1.0)):
        raise InfiniteQuantileError("Gaussian quantile of 0 or 1 is infinite")
    return special.ndtri(p)


def beta_density(x, p, q):
    """Beta(p, q) density, zero outside [0, 1].

    Broadcasts over all three arguments. Computed on the log scale so that
    the large shape parameters produced by small beta-kernel bandwidths do
    not overflow.
    """
    x, p, q = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    )
    if np.any(p <= 0) or np.any(q <= 0):
        raise InvalidParameterError("beta shape parameters must be positive")
    inside = (x >= 0.0) & (x <= 1.0)
    xc = np.clip(x, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        logpdf = (
            special.xlogy(p - 1.0, xc)
            + special.xlog1py(q - 1.0, -xc)
            - special.betaln(p, q)
        )
    out = np.where(inside, np.exp(logpdf), 0.0)
    return out if out.ndim else float(out)


def cov_sqrt(z):
    """Symmetric square root of the sample covariance of an (n, 2) array.

    The covariance uses divisor ``n - 1``.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != 2:
        raise InvalidParameterError("cov_sqrt expects an (n, 2) array")
    if z.shape[0] < 3:
        raise DegenerateDataError("cov_sqrt needs at least 3 observations")
    cov = np.cov(z, rowvar=False)
    for col in range(2):
        if not cov[col, col] > 0.0:
            raise DegenerateDataError(f"column {col} is constant")
    corr = cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1])
    if 1.0 - abs(corr) < 1e-12:
        raise DegenerateDataError("column 1 is an exact linear function of column 0")
    evals, evecs = np.linalg.eigh(cov)
    root = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    return 0.5 * (root + root.T)


def ranks_to_pseudo(x):
    """Column-wise ranks divided by ``n + 1`` (ties receive average ranks)."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] < 1:
        raise InvalidParameterError("need at least one observation")
    bad = np.argwhere(np.isnan(x))
    if bad.size:
        row, col = bad[0]
        raise InvalidParameterError(f"NaN at row {row}, column {col}")
    out = stats.rankdata(x, method="average", axis=0) / (x.shape[0] + 1)
    return out[:, 0] if squeeze else out


def radical_inverse(indices, base):
    """Van der Corput radical inverse of nonnegative integers in `base`."""
    i = np.array(indices, dtype=np.int64, copy=True)
    out = np.zeros(i.shape, dtype=float)
    scale = 1.0 / base
    while np.any(i > 0):
        i, digit = np.divmod(i, base)
        out += digit * scale
        scale /= base
    return out


@dataclass
class QuasiStream:
    """A 2-D Halton stream with a Cranley-Patterson shift.

    Point number ``index`` (zero based) is the radical inverse of
    ``index + 1`` in each base, shifted modulo one.
    """

    bases: tuple = (2, 3)
    index: int = 0
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def from_seed(cls, seed, bases=(2, 3)):
        shift = np.random.default_rng(seed).random(2)
        return cls(bases=tuple(bases), index=0, shift=shift)


def quasi_points(stream, k):
    """Draw the next `k` points of `stream` as a (k, 2) array in [0, 1)."""
    if k < 1:
        raise InvalidParameterError("k must be positive")
    idx = np.arange(stream.index + 1, stream.index + 1 + k)
    pts = np.column_stack([radical_inverse(idx, b) for b in stream.bases])
    pts = np.mod(pts + np.asarray(stream.shift, dtype=float), 1.0)
    stream.index += k
    return pts
