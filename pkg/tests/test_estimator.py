import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pdknn import ABSTAIN, PDkNNClassifier


def _blobs(seed=0, n=60):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(n, 2)), rng.normal(size=(n, 2)) + [6.0, 0.0]])
    return X, np.array([0] * n + [1] * n)


def test_params_round_trip():
    est = PDkNNClassifier(k=15, alpha=0.01, weights=(0.3, 0.7), target_pass=0.9)
    params = est.get_params()
    assert params["k"] == 15 and params["weights"] == (0.3, 0.7)
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.set_params(alpha=0.2).alpha == 0.2


def test_single_matrix_fit_predict():
    X, y = _blobs()
    Xc, _ = _blobs(seed=1)
    est = PDkNNClassifier(k=20).fit(X, y, X_calib=Xc)
    assert est.gammas_.shape == (1,)
    pred = est.predict(np.array([[0.0, 0.0], [6.0, 0.0], [60.0, 60.0]]))
    assert pred.tolist() == [0, 1, ABSTAIN]
    assert est.score(*_blobs(seed=2)) >= 0.95


def test_string_labels():
    X, y = _blobs()
    names = np.array(["cat", "dog"])[y]
    est = PDkNNClassifier(k=20, gamma=1e9).fit(X, names)
    assert list(est.classes_) == ["cat", "dog"]
    assert est.predict([[6.0, 0.2]])[0] == "dog"


def test_layer_fn_and_target_pass(toy):
    X, y = toy.subset("reference", 600)
    Xc, _ = toy.subset("calibration", 600)
    est = PDkNNClassifier(k=25, weights=(0.2, 0.8), gate_alpha=0.01, layer_fn=toy.net.forward_with_trace,
                          target_pass=0.965)
    est.fit(X, y, X_calib=Xc)
    assert est.calibration_.feasible
    assert abs(est.calibration_.pass_rate - 0.965) <= 0.005
    assert est.alpha_ == est.calibration_.alpha
    far = est.predict(np.array([[23.0, 3.0], [24.0, 2.0]]))
    assert list(far) == [ABSTAIN, ABSTAIN]
    # a blob centre against a point between classes 0 and 2
    scores = est.score_samples(np.array([[3.0, 3.0], [4.0, 5.0]]))
    assert scores[0] > scores[1]
    assert est.decision_function(np.array([[3.0, 3.0]])).shape == (1, 3)


def test_list_of_layers(toy):
    X, y = toy.subset("reference", 300)
    layers = toy.acts(X)
    est = PDkNNClassifier(k=20, gamma=1e9).fit(layers, y)
    verdicts = est.predict_verdicts([m[:5] for m in layers])
    assert len(verdicts) == 5


def test_errors():
    X, y = _blobs()
    with pytest.raises(NotFittedError):
        PDkNNClassifier().predict(X)
    with pytest.raises(ValueError, match="calibrated"):
        PDkNNClassifier(k=10).fit(X, y).predict(X)
    with pytest.raises(ValueError, match="exceeds"):
        PDkNNClassifier(k=500).fit(X, y)
    est = PDkNNClassifier(k=10, gamma=1.0).fit(X, y)
    with pytest.raises(ValueError, match="features"):
        est.predict(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PDkNNClassifier(k=10).fit([X, X[:5]], y)
