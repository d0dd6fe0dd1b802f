"""k-NN distance hypothesis tests for classify-or-abstain prediction."""

from .baselines import EvalReport, auroc, evaluate, evaluate_verdicts
from .estimator import ABSTAIN, PDkNNClassifier
from .pipeline import (
    PipelineConfig,
    Reference,
    Verdict,
    calibrate_alpha,
    calibrate_gammas,
    collect_evidence,
    np_calibrate,
    predict,
    predict_main,
    predict_rebel,
    predict_table2,
)

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN", "EvalReport", "PDkNNClassifier", "PipelineConfig", "Reference", "Verdict",
    "auroc", "calibrate_alpha", "calibrate_gammas", "collect_evidence", "evaluate",
    "evaluate_verdicts", "np_calibrate", "predict", "predict_main", "predict_rebel",
    "predict_table2",
]
