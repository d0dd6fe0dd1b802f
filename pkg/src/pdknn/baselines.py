"""Comparison detectors and evaluation metrics."""

from collections import Counter
from dataclasses import dataclass
import csv
import io

import numpy as np
from scipy.stats import rankdata

from .data import OOD_LABEL


@dataclass(frozen=True)
class BaselineDecision:
    """Per-point accept flags, argmax classes and the detector score (higher = more in-distribution)."""

    accepted: np.ndarray
    classes: np.ndarray
    scores: np.ndarray

    @property
    def decisions(self):
        return np.where(self.accepted, self.classes, OOD_LABEL)


def baseline_softmax_threshold(log_probs, tau):
    """Accept when the largest class probability reaches ``tau``.

    Parameters
    ----------
    log_probs : array-like of shape (n, C) or (C,)
        Log-probabilities; each row must exponentiate to a distribution.
    tau : float in [0, 1]
    """
    lp = np.atleast_2d(np.asarray(log_probs, dtype=float))
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    probs = np.exp(lp)
    if not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("log-probabilities are not normalized")
    top = probs.max(axis=1)
    return BaselineDecision(top >= tau, probs.argmax(axis=1), top)


def dknn_nonconformity(neighbor_labels, candidates):
    """Layer-summed count of neighbors whose label differs from the candidate.

    Parameters
    ----------
    neighbor_labels : sequence of ndarray
        One ``(n, k_l)`` label array per layer.
    candidates : array-like of shape (n,) or scalar
    """
    layers = [np.atleast_2d(np.asarray(l)) for l in neighbor_labels]
    if not layers:
        raise ValueError("need at least one layer")
    cand = np.asarray(candidates).reshape(-1, 1)
    return sum(np.sum(l != cand, axis=1) for l in layers)


def dknn_calibration_scores(neighbor_labels, labels):
    """Nonconformity of held-out points against their true labels."""
    return np.asarray(dknn_nonconformity(neighbor_labels, labels), dtype=float)


def dknn_class_pvalues(neighbor_labels, calibration_scores, n_classes):
    """Empirical p-value of every class: ``(1 + #{cal >= score}) / (1 + n_cal)``."""
    cal = np.sort(np.asarray(calibration_scores, dtype=float).ravel())
    if cal.size == 0:
        raise ValueError("calibration scores are empty")
    layers = [np.atleast_2d(np.asarray(l)) for l in neighbor_labels]
    n = layers[0].shape[0]
    pvals = np.empty((n, n_classes))
    for c in range(n_classes):
        score = dknn_nonconformity(layers, np.full(n, c))
        at_least = cal.size - np.searchsorted(cal, score, side="left")
        pvals[:, c] = (1.0 + at_least) / (1.0 + cal.size)
    return pvals


def baseline_dknn_credibility(neighbor_labels, calibration_scores, n_classes, threshold=0.0):
    """DkNN-style conformal prediction with credibility thresholding.

    The candidate is the class with the largest empirical p-value (see
    :func:`dknn_class_pvalues`) and that p-value is its credibility.
    Ties go to the lower class index.
    """
    pvals = dknn_class_pvalues(neighbor_labels, calibration_scores, n_classes)
    classes = pvals.argmax(axis=1)
    cred = pvals[np.arange(pvals.shape[0]), classes]
    return BaselineDecision(cred >= threshold, classes, cred)


def auroc(scores, positive):
    """Area under the ROC curve by the Mann-Whitney rank statistic with midranks.

    Returns ``None`` unless both positives and negatives are present.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    positive = np.asarray(positive, dtype=bool).ravel()
    if scores.shape != positive.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class EvalReport:
    n: int
    n_accepted: int
    pass_rate: float
    accuracy_on_accepted: object  # None when nothing with a label was accepted
    rejection_breakdown: dict
    auroc: object = None

    def as_dict(self):
        return {
            "n": self.n,
            "n_accepted": self.n_accepted,
            "pass_rate": self.pass_rate,
            "accuracy_on_accepted": self.accuracy_on_accepted,
            "auroc": self.auroc,
            **{f"rejected_{k}": v for k, v in sorted(self.rejection_breakdown.items())},
        }


def evaluate(decisions, labels, is_id, scores=None, reasons=None):
    """Selective-classification metrics.

    Parameters
    ----------
    decisions : array-like of shape (n,)
        Predicted class, or ``None`` / a negative value for abstention.
    labels : array-like of shape (n,)
        True class; ignored for out-of-distribution points.
    is_id : array-like of bool
    scores : array-like, optional
        Detector score, higher meaning more in-distribution; enables AUROC.
    reasons : sequence of str, optional
        Rejection reason per point; defaults to ``"abstain"``.
    """
    dec = np.array([-1 if d is None else int(d) for d in decisions], dtype=np.int64)
    labels = np.asarray(labels).ravel()
    is_id = np.asarray(is_id, dtype=bool).ravel()
    n = dec.size
    if labels.size != n or is_id.size != n:
        raise ValueError("decisions, labels and is_id must be aligned")
    accepted = dec >= 0
    n_acc = int(accepted.sum())
    scored = accepted & is_id
    acc = float(np.mean(dec[scored] == labels[scored])) if scored.any() else None
    if reasons is None:
        reasons = ["none" if a else "abstain" for a in accepted]
    rejected = [r for r, a in zip(reasons, accepted) if not a]
    breakdown = {r: c / len(rejected) for r, c in Counter(rejected).items()} if rejected else {}
    roc = None if scores is None else auroc(scores, is_id)
    return EvalReport(n, n_acc, n_acc / n if n else 0.0, acc, breakdown, roc)


def evaluate_verdicts(verdicts, labels, is_id):
    """:func:`evaluate` for p-DkNN verdicts, scored by ``1 - min_p``."""
    return evaluate([v.decision for v in verdicts], labels, is_id,
                    scores=[1.0 - v.min_p for v in verdicts],
                    reasons=[v.rejection_reason for v in verdicts])


METRIC_COLUMNS = ("dataset", "method", "n", "pass_rate", "accuracy_on_accepted", "auroc",
                  "rejected_inconclusive_p", "rejected_hull_exceeded", "rejected_abstain")


def _fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def metrics_csv(rows):
    """CSV text with one row per ``(dataset, method, EvalReport)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for dataset, method, rep in rows:
        d = rep.as_dict()
        w.writerow([dataset, method] + [_fmt(d.get(c, 0.0 if c.startswith("rejected_") else None))
                                        for c in METRIC_COLUMNS[2:]])
    return buf.getvalue()


def key_value_report(dataset, method, report):
    """Line-oriented ``key=value`` rendering of one report."""
    lines = [f"dataset={dataset}", f"method={method}"]
    lines += [f"{k}={_fmt(v)}" for k, v in report.as_dict().items()]
    return "\n".join(lines) + "\n"
