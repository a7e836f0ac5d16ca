"""Kernel estimation of bivariate copula densities.

Estimates are evaluated once on a transformed knot grid and afterwards
interpolated by piecewise cubics, which keeps evaluation, integration and
renormalization independent of the sample size.
"""

from kercop.errors import KercopError
from kercop.estimators import BandwidthSpec, Method, PseudoSample
from kercop.model import (
    DependenceReport,
    FittedCopula,
    cdf,
    dep_measures,
    density,
    fit,
    fit_stats,
    hfunc,
    hfunc_inverse,
    simulate,
)
from kercop.numcore import ranks_to_pseudo

__all__ = [
    "BandwidthSpec",
    "DependenceReport",
    "FittedCopula",
    "KercopError",
    "Method",
    "PseudoSample",
    "cdf",
    "dep_measures",
    "density",
    "fit",
    "fit_stats",
    "hfunc",
    "hfunc_inverse",
    "ranks_to_pseudo",
    "simulate",
]
__version__ = "0.1.0"
