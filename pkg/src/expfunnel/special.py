"""Numeric special functions backing the statistical checks.

Self-contained so the package needs no stats library at runtime: the
chi-squared survival function is computed from the regularized upper
incomplete gamma function (series below a+1, Lentz continued fraction
above), targeting 1e-10 relative accuracy against reference values.
"""
from __future__ import annotations

import math
from statistics import NormalDist

_EPS = 1e-16
_MAX_ITER = 500
_TINY = 1e-300

_STD_NORMAL = NormalDist()


def regularized_gamma_q(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a), the regularized upper incomplete gamma."""
    if a <= 0.0:
        raise ValueError(f"shape parameter must be positive, got {a}")
    if x < 0.0:
        raise ValueError(f"argument must be non-negative, got {x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_continued_fraction(a, x)


def _gamma_p_series(a: float, x: float) -> float:
    """P(a, x) by the lower-gamma power series; converges fast for x < a + 1."""
    term = 1.0 / a
    total = term
    denom = a
    for _ in range(_MAX_ITER):
        denom += 1.0
        term *= x / denom
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    log_prefix = -x + a * math.log(x) - math.lgamma(a)
    return min(1.0, total * math.exp(log_prefix))


def _gamma_q_continued_fraction(a: float, x: float) -> float:
    """Q(a, x) by the modified Lentz continued fraction; for x >= a + 1."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    log_prefix = -x + a * math.log(x) - math.lgamma(a)
    return min(1.0, math.exp(log_prefix) * h)


def chi2_sf(x: float, df: int) -> float:
    """Survival function of the chi-squared distribution with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {df}")
    if x < 0.0:
        return 1.0
    return regularized_gamma_q(df / 2.0, x / 2.0)


def normal_cdf(z: float) -> float:
    # erfc keeps the lower tail accurate far beyond where 1 - erf would cancel.
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile argument must be in (0, 1), got {p}")
    return _STD_NORMAL.inv_cdf(p)
