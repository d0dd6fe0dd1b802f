"""scikit-learn compatible wrapper around the prediction pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import pipeline as pl

ABSTAIN = -1


def _as_layers(X, layer_fn):
    # X is a feature matrix, or a list of per-layer matrices when layer_fn is None
    if layer_fn is not None:
        X = check_array(X)
        return [np.asarray(a, dtype=float) for a in layer_fn(X)], X.shape[0]
    if isinstance(X, (list, tuple)) and X and all(np.ndim(a) == 2 for a in X):
        layers = [check_array(a) for a in X]
        n = layers[0].shape[0]
        if any(a.shape[0] != n for a in layers):
            raise ValueError("every layer needs the same number of rows")
        return layers, n
    X = check_array(X)
    return [X], X.shape[0]


class PDkNNClassifier(ClassifierMixin, BaseEstimator):
    """Classify-or-abstain predictor built on k-NN distance tests.

    ``fit`` indexes the reference points. When ``X_calib`` is given it also
    calibrates the per-layer hull thresholds on it and, if ``target_pass``
    is set, the significance level so that this share of ``X_calib`` is
    accepted. ``predict`` returns ``ABSTAIN`` (-1) for rejected points.

    Parameters
    ----------
    k, alpha, gamma_quantile, weights, effect_kind, variant, gate_alpha,
    fdr_method, missing_fill, use_hull, gamma
        See :class:`pdknn.pipeline.PipelineConfig`.
    layer_fn : callable, optional
        Maps a raw feature matrix to a list of per-layer activations, for
        instance ``model.forward_with_trace``. Without it ``X`` is either a
        single feature matrix or a list of per-layer matrices.
    target_pass : float, optional
        Desired accepted share of the calibration set.

    Attributes
    ----------
    classes_ : ndarray
    reference_ : Reference
    gammas_ : ndarray or None
    alpha_ : float
        Significance level used by ``predict``.
    """

    def __init__(self, k=20, alpha=0.05, gamma_quantile=1.0, weights=None, effect_kind="glass",
                 variant="main", gate_alpha=None, fdr_method="bky", missing_fill="absent_farther",
                 use_hull=True, gamma=None, layer_fn=None, target_pass=None):
        self.k = k
        self.alpha = alpha
        self.gamma_quantile = gamma_quantile
        self.weights = weights
        self.effect_kind = effect_kind
        self.variant = variant
        self.gate_alpha = gate_alpha
        self.fdr_method = fdr_method
        self.missing_fill = missing_fill
        self.use_hull = use_hull
        self.gamma = gamma
        self.layer_fn = layer_fn
        self.target_pass = target_pass

    def _config(self, alpha=None):
        return pl.PipelineConfig(
            k=self.k, alpha=self.alpha if alpha is None else alpha,
            gamma_quantile=self.gamma_quantile,
            weights=None if self.weights is None else tuple(self.weights),
            effect_kind=self.effect_kind, variant=self.variant, gate_alpha=self.gate_alpha,
            fdr_method=self.fdr_method, missing_fill=self.missing_fill,
            use_hull=self.use_hull, gamma=self.gamma)

    def fit(self, X, y, X_calib=None):
        layers, n = _as_layers(X, self.layer_fn)
        _, y = check_X_y(layers[0], y)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        cfg = self._config()
        if cfg.k is not None and cfg.k > n:
            raise ValueError(f"k={cfg.k} exceeds the {n} reference points")
        self.reference_ = pl.Reference(layers, codes, n_classes=len(self.classes_))
        self.n_features_in_ = layers[0].shape[1]
        self.alpha_ = cfg.alpha
        self.gammas_ = None
        self.calibration_ = None
        if X_calib is not None:
            self.calibrate(X_calib)
        return self

    def calibrate(self, X_calib):
        """Set ``gammas_`` (and ``alpha_`` when ``target_pass`` is set) from held-out ID points."""
        check_is_fitted(self, "reference_")
        layers, _ = _as_layers(X_calib, self.layer_fn)
        cfg = self._config()
        evidence = pl.collect_evidence(self.reference_, layers, cfg)
        if cfg.variant == "main" and cfg.use_hull and cfg.gamma is None:
            self.gammas_ = pl.calibrate_gammas(self.reference_, evidence, cfg)
        if self.target_pass is not None:
            self.calibration_ = pl.calibrate_alpha(evidence, self.reference_, cfg,
                                                   self.target_pass, self.gammas_)
            self.alpha_ = self.calibration_.alpha
        return self

    def _needs_gammas(self, cfg):
        return cfg.variant == "main" and cfg.use_hull and cfg.gamma is None

    def predict_verdicts(self, X):
        """Full :class:`~pdknn.pipeline.Verdict` for every row."""
        check_is_fitted(self, "reference_")
        cfg = self._config(self.alpha_)
        if self._needs_gammas(cfg) and self.gammas_ is None:
            raise ValueError("hull thresholds are not calibrated; pass X_calib to fit or set gamma")
        layers, _ = _as_layers(X, self.layer_fn)
        if layers[0].shape[1] != self.n_features_in_:
            raise ValueError(f"X has {layers[0].shape[1]} features, expected {self.n_features_in_}")
        return pl.predict(self.reference_, layers, cfg, self.gammas_)

    def predict(self, X):
        verdicts = self.predict_verdicts(X)
        out = np.full(len(verdicts), ABSTAIN, dtype=object if self.classes_.dtype.kind not in "iu" else np.int64)
        for i, v in enumerate(verdicts):
            if v.accepted:
                out[i] = self.classes_[v.decision]
        return out

    def decision_function(self, X):
        """Aggregated per-class p-values, shape ``(n, n_classes)``; small means likely."""
        return np.array([v.p_vector for v in self.predict_verdicts(X)])

    def score_samples(self, X):
        """``1 - min_p``: higher means more in-distribution."""
        return np.array([1.0 - v.min_p for v in self.predict_verdicts(X)])

    def score(self, X, y, sample_weight=None):
        """Accuracy on accepted points (abstentions are excluded)."""
        pred = self.predict(X)
        y = np.asarray(y)
        keep = np.array([p != ABSTAIN for p in pred])
        if not keep.any():
            return 0.0
        w = None if sample_weight is None else np.asarray(sample_weight)[keep]
        return float(np.average(pred[keep] == y[keep], weights=w))
