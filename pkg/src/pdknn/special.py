"""Special functions and distribution tails used by the hypothesis tests."""

import math

import numpy as np

_CF_TOL = 1e-14
_CF_MAX_ITER = 300
_TINY = 1e-300


def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    x = float(x)
    if not x > 0 or math.isinf(x):
        raise ValueError(f"log_gamma requires a finite positive argument, got {x!r}")
    return math.lgamma(x)


def _beta_cf(a, b, x):
    # Modified Lentz evaluation of the incomplete beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h, True
    return h, False


def incbeta_with_status(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)`` and a convergence flag.

    The flag is False when the continued fraction hit its iteration cap;
    the value is then the last iterate.
    """
    a = float(a)
    b = float(b)
    x = float(x)
    if not (a > 0 and b > 0):
        raise ValueError(f"incomplete beta needs a > 0 and b > 0, got a={a!r}, b={b!r}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"incomplete beta needs 0 <= x <= 1, got x={x!r}")
    if x == 0.0:
        return 0.0, True
    if x == 1.0:
        return 1.0, True
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        cf, ok = _beta_cf(a, b, x)
        value = front * cf / a
    else:
        cf, ok = _beta_cf(b, a, 1.0 - x)
        value = 1.0 - front * cf / b
    return min(1.0, max(0.0, value)), ok


def regularized_incomplete_beta(a, b, x):
    """Regularized incomplete beta function ``I_x(a, b)``."""
    return incbeta_with_status(a, b, x)[0]


def student_t_sf(t, df):
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    df = float(df)
    t = float(t)
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df!r}")
    if math.isnan(t):
        raise ValueError("t statistic is NaN")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    # x = df / (df + t^2) computed without cancellation for large |t|
    x = 1.0 / (1.0 + (t / math.sqrt(df)) ** 2)
    tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
    return tail if t > 0 else 1.0 - tail


def f_sf(f, df1, df2):
    """Upper tail ``P(F > f)`` of the F distribution."""
    f = float(f)
    df1 = float(df1)
    df2 = float(df2)
    if not (df1 > 0 and df2 > 0):
        raise ValueError(f"degrees of freedom must be positive, got ({df1!r}, {df2!r})")
    if math.isnan(f) or f < 0:
        raise ValueError(f"F statistic must be nonnegative, got {f!r}")
    if f == 0.0:
        return 1.0
    if math.isinf(f):
        return 0.0
    x = df2 / (df2 + df1 * f)
    return regularized_incomplete_beta(0.5 * df2, 0.5 * df1, x)


def as_probability(p):
    """Validate and return ``p`` as a float in [0, 1]."""
    p = float(p)
    if np.isnan(p) or p < 0.0 or p > 1.0:
        raise ValueError(f"not a probability: {p!r}")
    return p
