"""Welch ANOVA, one-sided Welch t-tests, effect sizes and FDR correction."""

from dataclasses import dataclass
import math

import numpy as np

from .special import f_sf, student_t_sf

VARIANCE_FLOOR = 1e-12


class DegenerateGroups(ValueError):
    """Raised when a test's sample-size preconditions are not met."""


@dataclass(frozen=True)
class TestResult:
    """Outcome of a single test: p-value, effect size, statistic and df."""

    __test__ = False  # not a pytest class

    p: float
    effect: float
    statistic: float
    df: float


def _sample(values, name="distances"):
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size < 2:
        raise DegenerateGroups(f"{name} needs at least 2 samples, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def _floored_var(arr):
    return max(float(np.var(arr, ddof=1)), VARIANCE_FLOOR)


def welch_anova(groups):
    """One-way Welch ANOVA over groups of distances.

    Parameters
    ----------
    groups : sequence of array-like or mapping of class id -> array-like
        Each entry holds the distances of one class.

    Returns
    -------
    TestResult
        ``statistic`` is Welch's F*, ``df`` the denominator degrees of
        freedom and ``effect`` the eta-squared of the raw samples.
    """
    if hasattr(groups, "values"):
        groups = list(groups.values())
    samples = [_sample(g, "group") for g in groups]
    k = len(samples)
    if k < 2:
        raise DegenerateGroups(f"ANOVA needs at least 2 groups, got {k}")

    n = np.array([s.size for s in samples], dtype=float)
    means = np.array([s.mean() for s in samples])
    var = np.array([_floored_var(s) for s in samples])

    w = n / var
    w_sum = w.sum()
    grand_w = np.dot(w, means) / w_sum
    between = np.dot(w, (means - grand_w) ** 2) / (k - 1)
    lam = np.sum((1.0 - w / w_sum) ** 2 / (n - 1.0))
    denom = 1.0 + 2.0 * (k - 2) / (k * k - 1.0) * lam
    f_stat = float(between / denom)
    df1 = k - 1.0
    df2 = float((k * k - 1.0) / (3.0 * lam))

    pooled = np.concatenate(samples)
    ss_total = float(np.sum((pooled - pooled.mean()) ** 2))
    ss_between = float(np.dot(n, (means - pooled.mean()) ** 2))
    eta_sq = ss_between / ss_total if ss_total > 0 else 0.0
    eta_sq = min(1.0, max(0.0, eta_sq))

    return TestResult(p=f_sf(f_stat, df1, df2), effect=eta_sq, statistic=f_stat, df=df2)


def welch_t_one_sided(c1, c2, effect="glass"):
    """One-sided Welch t-test of H1: mean(c1) > mean(c2).

    A small p-value means the points of ``c2`` are closer on average.
    """
    a = _sample(c1, "c1")
    b = _sample(c2, "c2")
    va = _floored_var(a) / a.size
    vb = _floored_var(b) / b.size
    se2 = va + vb
    t = float((a.mean() - b.mean()) / math.sqrt(se2))
    df = float(se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1)))
    e = effect_size(a, b, effect)
    return TestResult(p=student_t_sf(t, df), effect=e, statistic=t, df=df)


def effect_glass(c1, c2):
    """Glass's delta ``(mean(c1) - mean(c2)) / sd(c2)``."""
    a = np.asarray(c1, dtype=float).ravel()
    if a.size < 1:
        raise DegenerateGroups("c1 is empty")
    b = _sample(c2, "c2")
    return float((a.mean() - b.mean()) / math.sqrt(_floored_var(b)))


def effect_hedges(c1, c2):
    """Hedges' g: Cohen's d on the pooled sd with the small-sample factor."""
    a = _sample(c1, "c1")
    b = _sample(c2, "c2")
    n1, n2 = a.size, b.size
    pooled = ((n1 - 1) * np.var(a, ddof=1) + (n2 - 1) * np.var(b, ddof=1)) / (n1 + n2 - 2)
    pooled = max(float(pooled), VARIANCE_FLOOR)
    j = 1.0 - 3.0 / (4.0 * (n1 + n2) - 9.0)
    return float(j * (a.mean() - b.mean()) / math.sqrt(pooled))


_EFFECTS = {"glass": effect_glass, "hedges": effect_hedges}


def effect_size(c1, c2, kind="glass"):
    try:
        fn = _EFFECTS[kind]
    except KeyError:
        raise ValueError(f"unknown effect kind {kind!r}; expected one of {sorted(_EFFECTS)}")
    return fn(c1, c2)


def _bh_adjust(p):
    # Benjamini-Hochberg adjusted values, input order preserved.
    m = p.size
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * m / np.arange(1, m + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(ranked, 1.0)
    return out


def bh_adjust(p):
    """Plain Benjamini-Hochberg adjustment."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        return p.copy()
    return _bh_adjust(p.ravel()).reshape(p.shape)


def fdr_two_stage(p, alpha=0.05, method="bky"):
    """Two-stage (adaptive) Benjamini-Hochberg adjustment.

    Stage one runs BH at ``alpha' = alpha / (1 + alpha)`` and counts the
    rejections ``r1``; the true-null count is estimated as ``m0 = m - r1``
    and the BH-adjusted values are rescaled by ``m0 / m``. With
    ``method="bky"`` the result is further multiplied by ``1 + alpha`` so
    that comparing an adjusted value against ``alpha`` reproduces the
    second-stage decision. ``method="bh"`` skips the ``alpha / (1 + alpha)``
    shrinkage of the first stage.

    Returns adjusted values in input order, clipped to [0, 1].
    """
    p = np.asarray(p, dtype=float)
    shape = p.shape
    flat = p.ravel()
    if flat.size == 0:
        return flat.reshape(shape)
    if np.any(np.isnan(flat)) or np.any(flat < 0) or np.any(flat > 1):
        raise ValueError("p-values must lie in [0, 1]")
    if method == "bky":
        fact = 1.0 + alpha
    elif method == "bh":
        fact = 1.0
    else:
        raise ValueError(f"unknown two-stage method {method!r}")
    m = flat.size
    alpha_prime = alpha / fact
    adjusted = _bh_adjust(flat)
    r1 = int(np.sum(adjusted <= alpha_prime))
    if 0 < r1 < m:
        adjusted = adjusted * (m - r1) / m
    adjusted = np.minimum(adjusted * fact, 1.0)
    return adjusted.reshape(shape)
