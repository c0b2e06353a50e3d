"""Welch's unequal-variance t-test with a self-contained t distribution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgumentError, NumericFailure

_TINY = 1e-300
_EPS = 1e-15


def _betacf(a: float, b: float, x: float, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise NumericFailure(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise InvalidArgumentError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise InvalidArgumentError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, dof: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise InvalidArgumentError("degrees of freedom must be positive")
    if t == 0:
        return 1.0
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc_regularized(0.5 * dof, 0.5, dof / (dof + t * t)))


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t_test(a, b) -> WelchResult:
    """Two-sided Welch test of equal means without assuming equal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise InvalidArgumentError("each sample needs at least two observations")
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        raise InvalidArgumentError("t statistic undefined: both samples have zero variance")
    sa, sb = va / a.size, vb / b.size
    se2 = sa + sb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    dof = float(se2**2 / (sa**2 / (a.size - 1) + sb**2 / (b.size - 1)))
    return WelchResult(t, dof, t_sf_two_sided(t, dof))
