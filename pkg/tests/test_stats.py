import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from statsmodels.stats.multitest import fdrcorrection_twostage

from pdknn.stats import (
    DegenerateGroups,
    bh_adjust,
    effect_glass,
    effect_hedges,
    effect_size,
    fdr_two_stage,
    welch_anova,
    welch_t_one_sided,
)

from oracles import bky_by_hand, f_sf_quad, t_sf_quad, welch_anova_reference, welch_t_reference

samples = st.lists(st.floats(min_value=-100, max_value=100, allow_nan=False), min_size=2, max_size=30)


def _non_constant(xs):
    return np.var(xs, ddof=1) > 1e-6


# -- Welch t ---------------------------------------------------------------

def test_t_identical_groups():
    res = welch_t_one_sided([1, 2, 3, 4], [1, 2, 3, 4])
    assert res.statistic == 0.0
    assert res.p == pytest.approx(0.5, abs=1e-15)


def test_t_c2_closer_is_significant():
    res = welch_t_one_sided([5.0, 5.1, 4.9, 5.0], [1.0, 1.1, 0.9, 1.0])
    assert res.p < 1e-4
    assert res.p == pytest.approx(t_sf_quad(res.statistic, res.df), abs=1e-10)


def test_t_c1_closer_is_not_significant():
    res = welch_t_one_sided([1.0, 1.1, 0.9], [5.0, 5.1, 4.9])
    assert res.p > 0.999
    assert res.p == pytest.approx(1.0 - t_sf_quad(-res.statistic, res.df), abs=1e-10)


@pytest.mark.parametrize("seed", range(6))
def test_t_matches_textbook_and_quadrature(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(2.0, 1.0 + seed, size=5 + 3 * seed)
    b = rng.normal(1.2, 0.5, size=7 + seed)
    t, df = welch_t_reference(a, b)
    res = welch_t_one_sided(a, b)
    assert res.statistic == pytest.approx(t, rel=1e-12)
    assert res.df == pytest.approx(df, rel=1e-12)
    assert abs(res.p - t_sf_quad(t, df)) <= 1e-6


@settings(max_examples=150, deadline=None)
@given(samples, samples)
def test_t_complement(a, b):
    if not (_non_constant(a) and _non_constant(b)):
        return
    assert welch_t_one_sided(a, b).p + welch_t_one_sided(b, a).p == pytest.approx(1.0, abs=1e-9)


def test_t_constant_groups_are_floored():
    res = welch_t_one_sided([2.0, 2.0, 2.0], [1.0, 1.0, 1.0])
    assert np.isfinite(res.statistic)
    assert res.p < 1e-15


@pytest.mark.parametrize("a, b", [([1.0], [1.0, 2.0]), ([1.0, 2.0], [3.0])])
def test_t_degenerate(a, b):
    with pytest.raises(DegenerateGroups):
        welch_t_one_sided(a, b)


def test_t_null_calibration_monte_carlo():
    # both groups iid normal: the fraction of p <= alpha must match alpha
    rng = np.random.default_rng(20240101)
    trials = 100_000
    a = rng.normal(size=(trials, 10))
    b = rng.normal(size=(trials, 10))
    p = np.array([welch_t_one_sided(x, y).p for x, y in zip(a, b)])
    for alpha in (0.01, 0.05):
        se = math.sqrt(alpha * (1 - alpha) / trials)
        assert abs(np.mean(p <= alpha) - alpha) <= 3 * se


# -- Welch ANOVA -----------------------------------------------------------

def test_anova_identical_groups():
    res = welch_anova([[1, 2, 3], [1, 2, 3]])
    assert res.statistic == pytest.approx(0.0, abs=1e-15)
    assert res.p == 1.0
    assert res.effect == 0.0


def test_anova_separated_groups():
    groups = [[0, 0.1, -0.1], [10, 10.1, 9.9]]
    res = welch_anova(groups)
    f, d1, d2 = welch_anova_reference(groups)
    assert res.p < 1e-4
    assert abs(res.p - f_sf_quad(f, d1, d2)) <= 1e-6


def test_anova_single_group():
    with pytest.raises(DegenerateGroups):
        welch_anova([[1.0, 2.0, 3.0]])


def test_anova_small_group():
    with pytest.raises(DegenerateGroups):
        welch_anova([[1.0, 2.0, 3.0], [4.0]])


def test_anova_accepts_mapping():
    groups = {0: [1.0, 2.0, 2.5], 3: [4.0, 4.4, 5.0, 4.1]}
    assert welch_anova(groups) == welch_anova(list(groups.values()))


@pytest.mark.parametrize("seed", range(6))
def test_anova_matches_textbook_and_quadrature(seed):
    rng = np.random.default_rng(100 + seed)
    k = 2 + seed % 4
    groups = [list(rng.normal(rng.uniform(0, 1), rng.uniform(0.3, 2), size=rng.integers(3, 15)))
              for _ in range(k)]
    f, d1, d2 = welch_anova_reference(groups)
    res = welch_anova(groups)
    assert res.statistic == pytest.approx(f, rel=1e-10)
    assert res.df == pytest.approx(d2, rel=1e-10)
    assert abs(res.p - f_sf_quad(f, d1, d2)) <= 1e-6
    assert 0.0 <= res.effect <= 1.0


def test_anova_null_calibration_monte_carlo():
    # three equal-variance normal groups; Welch's F is close to exact here
    rng = np.random.default_rng(7)
    trials = 20_000
    data = rng.normal(size=(trials, 3, 30))
    p = np.array([welch_anova(list(g)).p for g in data])
    for alpha in (0.01, 0.05):
        se = math.sqrt(alpha * (1 - alpha) / trials)
        assert abs(np.mean(p <= alpha) - alpha) <= 3 * se


# -- effect sizes ----------------------------------------------------------

def test_glass_examples():
    assert effect_glass([1, 2, 3], [1, 2, 3]) == 0.0
    assert effect_glass([3, 4, 5], [1, 2, 3]) == pytest.approx(2.0)
    assert effect_glass([5.0], [0.0, 1.0, 2.0, 1.0, 1.0]) == pytest.approx(4.0 / math.sqrt(0.5))


def test_hedges_examples():
    assert effect_hedges([1, 2, 3], [1, 2, 3]) == 0.0
    assert effect_hedges([3, 4, 5], [1, 2, 3]) == pytest.approx(1.6)
    # n1 = n2 = 2, means one pooled sd apart: J = 1 - 3 / 7
    s = 1 / math.sqrt(2)
    assert effect_hedges([1 + s, 1 - s], [s, -s]) == pytest.approx(1 - 3 / 7)
    # n1 = n2 = 4: J = 1 - 3 / 23
    s = math.sqrt(3) / 2
    assert effect_hedges([1 + s, 1 + s, 1 - s, 1 - s], [s, s, -s, -s]) == pytest.approx(1 - 3 / 23)


def test_effect_kind_dispatch():
    assert effect_size([3, 4, 5], [1, 2, 3], "glass") == pytest.approx(2.0)
    assert effect_size([3, 4, 5], [1, 2, 3], "hedges") == pytest.approx(1.6)
    with pytest.raises(ValueError):
        effect_size([1, 2], [1, 2], "cohen")


@settings(max_examples=150, deadline=None)
@given(samples, samples)
def test_glass_sign(a, b):
    diff = np.mean(a) - np.mean(b)
    e = effect_glass(a, b)
    if abs(diff) > 1e-9:
        assert np.sign(e) == np.sign(diff)


# -- two-stage FDR ---------------------------------------------------------

def test_fdr_trivial_inputs():
    assert np.all(fdr_two_stage(np.ones(7), 0.05) == 1.0)
    assert np.all(fdr_two_stage(np.zeros(7), 0.05) == 0.0)
    assert fdr_two_stage([], 0.05).size == 0


def test_fdr_hand_fixture():
    p = [0.01, 0.02, 0.5, 0.9]
    expected = bky_by_hand(p, 0.05)
    assert expected == pytest.approx([0.021, 0.021, 0.35, 0.4725], abs=1e-15)
    assert np.array_equal(fdr_two_stage(p, 0.05), np.array(expected))


def test_fdr_matches_statsmodels():
    rng = np.random.default_rng(3)
    for _ in range(100):
        p = rng.uniform(size=rng.integers(1, 50)) ** rng.uniform(0.5, 5)
        ref = fdrcorrection_twostage(p, 0.05, method="bky", maxiter=1)[1]
        np.testing.assert_allclose(fdr_two_stage(p, 0.05), ref, atol=1e-14)


def test_fdr_preserves_shape():
    p = np.random.default_rng(0).uniform(size=(2, 3, 3))
    assert fdr_two_stage(p, 0.1).shape == (2, 3, 3)


def test_fdr_rejects_invalid():
    with pytest.raises(ValueError):
        fdr_two_stage([0.2, 1.2])
    with pytest.raises(ValueError):
        fdr_two_stage([0.2], method="holm")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=40),
       st.sampled_from([0.01, 0.05, 0.1]), st.randoms(use_true_random=False))
def test_fdr_properties(p, alpha, rnd):
    p = np.array(p)
    adj = fdr_two_stage(p, alpha)
    assert np.all((adj >= 0) & (adj <= 1))
    perm = list(range(p.size))
    rnd.shuffle(perm)
    np.testing.assert_allclose(fdr_two_stage(p[perm], alpha), adj[perm], atol=1e-15)
    bh_reject = bh_adjust(p) <= alpha / (1 + alpha)
    assert np.all(adj[bh_reject] <= alpha)
