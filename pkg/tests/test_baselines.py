import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdknn.baselines import (
    auroc,
    baseline_dknn_credibility,
    baseline_softmax_threshold,
    dknn_calibration_scores,
    dknn_class_pvalues,
    dknn_nonconformity,
    evaluate,
    key_value_report,
    metrics_csv,
)

from oracles import auroc_pairs


def test_softmax_threshold_examples():
    uniform = np.full((1, 3), math.log(1 / 3))
    assert not baseline_softmax_threshold(uniform, 0.5).accepted[0]
    onehot = np.log(np.array([[0.98, 0.01, 0.01]]))
    dec = baseline_softmax_threshold(onehot, 0.9)
    assert dec.accepted[0] and dec.classes[0] == 0
    rnd = np.log(np.random.default_rng(0).dirichlet(np.ones(4), size=50))
    assert baseline_softmax_threshold(rnd, 0.0).accepted.all()
    with pytest.raises(ValueError):
        baseline_softmax_threshold(np.zeros((1, 3)), 0.5)


def test_nonconformity_counts():
    layers = [np.array([[0, 0, 1]]), np.array([[1, 1, 1]])]
    assert dknn_nonconformity(layers, [0])[0] == 4
    assert dknn_nonconformity(layers, [1])[0] == 2


def test_credibility_examples():
    cal = np.array([0, 1, 2, 3, 5])
    agree = [np.array([[2, 2, 2]]), np.array([[2, 2, 2]])]
    dec = baseline_dknn_credibility(agree, cal, 3, threshold=0.5)
    assert dec.classes[0] == 2 and dec.scores[0] == 1.0 and dec.accepted[0]
    # class 1 never appears: nonconformity 6 exceeds every calibration score
    p = dknn_class_pvalues(agree, cal, 3)
    assert p[0, 1] <= 1 / (cal.size + 1)
    dec = baseline_dknn_credibility(agree, cal, 3, threshold=0.99)
    assert dec.accepted[0]
    mixed = [np.array([[0, 1, 0]]), np.array([[1, 0, 1]])]
    dec = baseline_dknn_credibility(mixed, cal, 2, threshold=0.9)
    assert dec.classes[0] == 0 and not dec.accepted[0]
    with pytest.raises(ValueError):
        baseline_dknn_credibility(agree, [], 3)


def test_credibility_super_uniform():
    rng = np.random.default_rng(1)

    def sample(n):
        y = rng.integers(0, 3, n)
        # noisy neighborhoods: each neighbor keeps the true label with prob 0.7
        layers = []
        for _ in range(2):
            keep = rng.uniform(size=(n, 10)) < 0.7
            layers.append(np.where(keep, y[:, None], rng.integers(0, 3, (n, 10))))
        return layers, y

    cal_layers, cal_y = sample(2000)
    cal = dknn_calibration_scores(cal_layers, cal_y)
    test_layers, test_y = sample(20000)
    score = dknn_nonconformity(test_layers, test_y)
    srt = np.sort(cal)
    p_true = (1 + cal.size - np.searchsorted(srt, score, side="left")) / (1 + cal.size)
    for alpha in (0.05, 0.1, 0.2):
        se = math.sqrt(alpha * (1 - alpha) / test_y.size)
        assert np.mean(p_true <= alpha) <= alpha + 3 * se + 1.0 / cal.size


def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5
    assert auroc([0.3, 0.4], [1, 1]) is None
    rng = np.random.default_rng(2)
    s = rng.uniform(size=10_000)
    lab = np.arange(10_000) % 2 == 0
    assert abs(auroc(s, lab) - 0.5) <= 0.02


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=2, max_size=40), st.integers(0, 2 ** 32 - 1))
def test_auroc_rank_oracle_and_monotone_invariance(scores, seed):
    rng = np.random.default_rng(seed)
    scores = np.array(scores, float)
    lab = rng.uniform(size=scores.size) < 0.5
    if lab.all() or not lab.any():
        return
    value = auroc(scores, lab)
    assert value == pytest.approx(auroc_pairs(scores[lab], scores[~lab]), abs=1e-12)
    assert auroc(np.exp(scores) * 3 - 1, lab) == pytest.approx(value, abs=1e-12)


def test_evaluate_examples():
    rep = evaluate([0, 1, 2], [0, 1, 2], [True] * 3)
    assert rep.pass_rate == 1.0 and rep.accuracy_on_accepted == 1.0
    assert rep.rejection_breakdown == {}
    rep = evaluate([None, None], [0, 1], [True, True], reasons=["inconclusive_p", "hull_exceeded"])
    assert rep.pass_rate == 0.0 and rep.accuracy_on_accepted is None
    assert rep.rejection_breakdown == {"inconclusive_p": 0.5, "hull_exceeded": 0.5}
    rep = evaluate([0, -1, 1, None, 2], [0, 1, 2, 0, -1], [1, 1, 1, 1, 0], scores=[5, 1, 4, 2, 0])
    assert rep.n_accepted == 3 and rep.pass_rate * rep.n == rep.n_accepted
    assert rep.accuracy_on_accepted == 0.5
    assert rep.auroc == 1.0
    with pytest.raises(ValueError):
        evaluate([0], [0, 1], [True])


def test_emitters():
    rep = evaluate([0, None], [0, 1], [True, True], reasons=["none", "inconclusive_p"])
    text = metrics_csv([("gauss", "pdknn", rep)])
    head, row = text.strip().split("\n")
    assert head.startswith("dataset,method,n,pass_rate")
    assert row.split(",")[:4] == ["gauss", "pdknn", "2", "0.5"]
    kv = key_value_report("gauss", "pdknn", rep)
    assert "pass_rate=0.5" in kv and "auroc=NA" in kv and "rejected_inconclusive_p=1" in kv
