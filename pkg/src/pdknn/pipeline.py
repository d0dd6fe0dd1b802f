"""Classify-or-abstain prediction from k-nearest-neighbor distance tests.

Three variants share the same per-layer machinery:

``main``
    ANOVA gate, pairwise tests or a uniform fill, FDR correction,
    aggregation, argmax-effect class, min-p significance and a convex hull
    check on the predicted class.
``rebel``
    as ``main`` without the hull; layers failing the gate keep p = 1,
    e = 0, and the decision uses the p-value of the argmax-effect class.
``table2``
    pairwise tests only, no gate, no correction, no hull; the class is the
    argmin of the aggregated p-values.

The per-layer test outcomes do not depend on ``alpha``; they are computed
once per point (:class:`PointEvidence`) so that sweeping ``alpha`` only
repeats the cheap decision step.
"""

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from . import aggregation as agg
from .hull import HullSpec, hull_distance
from .neighbors import LayerIndex
from .stats import DegenerateGroups, welch_anova, welch_t_one_sided

logger = logging.getLogger(__name__)

VARIANTS = ("main", "rebel", "table2")
EFFECT_KINDS = ("glass", "hedges")
REASONS = ("none", "inconclusive_p", "hull_exceeded")


@dataclass(frozen=True)
class PipelineConfig:
    """Hyper-parameters of the prediction procedure.

    ``gate_alpha`` defaults to ``alpha``. ``gamma`` overrides the per-layer
    hull thresholds with one global value. ``weights=None`` means uniform.
    ``k=None`` is allowed for the ``rebel`` variant and resolves to
    :func:`rebel_default_k` of the reference size.
    """

    k: int = 50
    alpha: float = 0.05
    gamma_quantile: float = 1.0
    weights: tuple = None
    effect_kind: str = "glass"
    variant: str = "main"
    omega: float = 0.5
    gate_alpha: float = None
    fdr_method: str = "bky"
    missing_fill: str = "absent_farther"
    min_class_count: int = 2
    transpose: bool = False
    use_hull: bool = True
    gamma: float = None

    def __post_init__(self):
        if self.k is None:
            if self.variant != "rebel":
                raise ValueError("k=None is only meaningful for the rebel variant")
        elif int(self.k) < 2:
            raise ValueError("k must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gate_alpha is not None and not 0.0 < self.gate_alpha <= 1.0:
            raise ValueError("gate_alpha must lie in (0, 1]")
        if not 0.0 < self.gamma_quantile <= 1.0:
            raise ValueError("gamma_quantile must lie in (0, 1]")
        if self.effect_kind not in EFFECT_KINDS:
            raise ValueError(f"effect_kind must be one of {EFFECT_KINDS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")
        if self.missing_fill not in agg.MISSING_FILLS:
            raise ValueError(f"missing_fill must be one of {agg.MISSING_FILLS}")
        if self.min_class_count < 2:
            raise ValueError("min_class_count must be at least 2")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in agg.normalize_weights(self.weights)))

    @property
    def gate(self):
        return self.alpha if self.gate_alpha is None else self.gate_alpha

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class Verdict:
    """Outcome for one point. ``decision`` is the class id or ``None`` for abstain."""

    decision: object
    p_vector: np.ndarray
    effect_vector: np.ndarray
    min_p: float
    rejection_reason: str
    candidate: int = -1

    @property
    def accepted(self):
        return self.decision is not None

    def __post_init__(self):
        if self.decision is not None and (self.rejection_reason != "none"):
            raise ValueError("accepted verdict must have rejection_reason 'none'")
        if self.decision is None and self.rejection_reason == "none":
            raise ValueError("abstention needs a rejection reason")


def rebel_default_k(n):
    """Neighbor-count heuristic ``ceil(n ** 0.4)``."""
    return int(math.ceil(n ** 0.4 - 1e-12))


class Reference:
    """Indexed reference activations plus per-class hulls for every layer.

    Parameters
    ----------
    layers : sequence of ndarray
        ``(V, D_l)`` reference activations per layer.
    labels : array-like of shape (V,)
    n_classes : int, optional
        Defaults to ``max(labels) + 1``.
    names : sequence of str, optional
    hull_options : dict, optional
        Forwarded to :class:`~pdknn.hull.HullSpec`.
    """

    def __init__(self, layers, labels, n_classes=None, names=None, hull_options=None):
        labels = np.asarray(labels).astype(np.int64).ravel()
        if len(layers) == 0:
            raise ValueError("reference needs at least one layer")
        names = names or [f"layer_{i}" for i in range(len(layers))]
        self.indices = [LayerIndex(m, labels, n) for m, n in zip(layers, names)]
        self.labels = labels
        self.n_classes = int(labels.max()) + 1 if n_classes is None else int(n_classes)
        if labels.max() >= self.n_classes:
            raise ValueError("labels exceed n_classes")
        self.names = list(names)
        self._hull_options = dict(hull_options or {})
        self._hulls = {}

    @classmethod
    def from_activation_set(cls, aset, n_classes=None, hull_options=None):
        return cls(aset.layers, aset.labels, n_classes, aset.names, hull_options)

    @property
    def n_layers(self):
        return len(self.indices)

    @property
    def n_references(self):
        return self.indices[0].n_references

    def hull(self, layer, cls_id):
        key = (layer, int(cls_id))
        if key not in self._hulls:
            members = self.indices[layer].matrix[self.labels == cls_id]
            if members.shape[0] == 0:
                self._hulls[key] = None
            else:
                self._hulls[key] = HullSpec(members, **self._hull_options)
        return self._hulls[key]

    def hulls_for_layer(self, layer):
        return {c: self.hull(layer, c) for c in range(self.n_classes)}

    def hull_distances(self, activations, cls_id):
        """Distance of one point to class ``cls_id``'s hull at every layer."""
        out = np.empty(self.n_layers)
        for layer, act in enumerate(activations):
            spec = self.hull(layer, cls_id)
            out[layer] = np.inf if spec is None else hull_distance(spec, act)
        return out


@dataclass
class LayerEvidence:
    groups: tuple  # classes with enough neighbors to be tested
    present: tuple  # every class seen among the neighbors
    anova_p: float  # 1.0 when fewer than two groups could be tested
    anova_effect: float
    pairwise: dict  # (c1, c2) -> (p, effect)


@dataclass
class PointEvidence:
    """Alpha-independent test outcomes of one point across layers."""

    layers: list
    activations: list
    _hull_cache: dict = field(default_factory=dict)


def layer_evidence(distances, labels, cfg):
    """Run ANOVA and all ordered pairwise tests on one neighborhood."""
    distances = np.asarray(distances, dtype=float)
    labels = np.asarray(labels)
    present = tuple(int(c) for c in np.unique(labels))
    grouped = {c: distances[labels == c] for c in present}
    groups = tuple(c for c in present if grouped[c].size >= cfg.min_class_count)

    anova_p, anova_e = 1.0, 0.0
    if len(groups) >= 2:
        try:
            res = welch_anova([grouped[c] for c in groups])
            anova_p, anova_e = res.p, res.effect
        except DegenerateGroups:
            pass

    pairwise = {}
    for c1 in groups:
        for c2 in groups:
            if c1 == c2:
                continue
            res = welch_t_one_sided(grouped[c1], grouped[c2], effect=cfg.effect_kind)
            pairwise[(c1, c2)] = (res.p, res.effect)
    return LayerEvidence(groups, present, anova_p, anova_e, pairwise)


def collect_evidence(reference, activations, cfg):
    """Evidence for a batch of points.

    ``activations`` is a list with one ``(n, D_l)`` array per layer.
    """
    if len(activations) != reference.n_layers:
        raise ValueError(f"expected {reference.n_layers} layers, got {len(activations)}")
    acts = [np.atleast_2d(np.asarray(a, dtype=float)) for a in activations]
    n = acts[0].shape[0]
    if any(a.shape[0] != n for a in acts):
        raise ValueError("every layer needs the same number of points")
    k = rebel_default_k(reference.n_references) if cfg.k is None else cfg.k
    per_layer = [index.query_batch(a, k) for index, a in zip(reference.indices, acts)]
    out = []
    for i in range(n):
        layers = [layer_evidence(d[i], lab[i], cfg) for d, lab, _ in per_layer]
        out.append(PointEvidence(layers, [a[i] for a in acts]))
    return out


def _slab_fill(ptensor, etensor, layer, ev, cfg, gated):
    # gated: None means no gate (table2), else the gate level
    if len(ev.groups) < 2:
        if len(ev.groups) == 1 and cfg.missing_fill == "absent_farther":
            agg.fill_layer(ptensor, etensor, layer, pairwise={}, present=ev.groups,
                           missing="absent_farther")
        elif gated is not None and cfg.variant == "main":
            agg.fill_layer(ptensor, etensor, layer, fill_p=1.0, fill_e=0.0)
        return
    if gated is not None and not ev.anova_p < gated:
        if cfg.variant == "main":
            agg.fill_layer(ptensor, etensor, layer, fill_p=ev.anova_p, fill_e=ev.anova_effect)
        return
    agg.fill_layer(ptensor, etensor, layer, pairwise=ev.pairwise, present=ev.groups,
                   missing=cfg.missing_fill)


def point_tensors(evidence, n_classes, cfg, alpha=None):
    """Raw (uncorrected) p-value and effect tensors of one point."""
    alpha = cfg.alpha if alpha is None else alpha
    gate = None if cfg.variant == "table2" else (cfg.gate if cfg.gate_alpha is not None else alpha)
    p, e = agg.init_tensors(len(evidence.layers), n_classes)
    for layer, ev in enumerate(evidence.layers):
        _slab_fill(p, e, layer, ev, cfg, gate)
    return p, e


def _argmax_effect(effects, pvals):
    order = np.lexsort((np.arange(effects.size), pvals, -effects))
    return int(order[0])


def decide(evidence, reference, cfg, gammas=None, alpha=None):
    """Turn one point's evidence into a :class:`Verdict`."""
    alpha = cfg.alpha if alpha is None else alpha
    n_classes = reference.n_classes
    p, e = point_tensors(evidence, n_classes, cfg, alpha)
    if cfg.variant != "table2":
        p = agg.correct(p, alpha, method=cfg.fdr_method)
    layer_p = agg.aggregate_layers(p, cfg.weights)
    p_vec = agg.aggregate_classes(layer_p, transpose=cfg.transpose)
    e_vec = agg.aggregate_effects(e, cfg.weights, transpose=cfg.transpose)

    if cfg.variant == "table2":
        cand = int(np.argmin(p_vec))
        p_tilde = float(p_vec[cand])
    elif cfg.variant == "rebel":
        cand = _argmax_effect(e_vec, p_vec)
        p_tilde = float(p_vec[cand])
    else:
        cand = _argmax_effect(e_vec, p_vec)
        p_tilde = float(p_vec.min())
        if int(np.argmin(p_vec)) != cand and logger.isEnabledFor(logging.DEBUG):
            logger.debug("argmin p (%d) differs from argmax effect (%d)", int(np.argmin(p_vec)), cand)

    if not p_tilde < alpha:
        return Verdict(None, p_vec, e_vec, p_tilde, "inconclusive_p", cand)
    if cfg.variant == "main" and cfg.use_hull:
        if gammas is None and cfg.gamma is None:
            raise ValueError("hull thresholds missing: calibrate gammas or set cfg.gamma")
        limits = np.full(reference.n_layers, cfg.gamma) if cfg.gamma is not None else np.asarray(gammas)
        dists = point_hull_distances(evidence, reference, cand)
        if np.any(dists > limits):
            return Verdict(None, p_vec, e_vec, p_tilde, "hull_exceeded", cand)
    return Verdict(cand, p_vec, e_vec, p_tilde, "none", cand)


def point_hull_distances(evidence, reference, cls_id):
    cache = evidence._hull_cache
    if cls_id not in cache:
        cache[cls_id] = reference.hull_distances(evidence.activations, cls_id)
    return cache[cls_id]


def predict(reference, activations, cfg, gammas=None):
    """Verdicts for a batch of points (one ``(n, D_l)`` array per layer)."""
    evidence = collect_evidence(reference, activations, cfg)
    return [decide(ev, reference, cfg, gammas) for ev in evidence]


def _single(activations):
    return [np.asarray(a, dtype=float)[None, :] for a in activations]


def predict_main(activations, reference, cfg, gammas=None):
    """Verdict for one point given its per-layer activation vectors."""
    return predict(reference, _single(activations), cfg.with_(variant="main"), gammas)[0]


def predict_rebel(activations, reference, cfg):
    cfg = cfg.with_(variant="rebel")
    if cfg.k is None:
        cfg = cfg.with_(k=rebel_default_k(reference.n_references))
    return predict(reference, _single(activations), cfg)[0]


def predict_table2(activations, reference, cfg):
    return predict(reference, _single(activations), cfg.with_(variant="table2"))[0]


def predicted_classes(evidence, reference, cfg):
    """Candidate class of each point, ignoring significance and hull."""
    plain = cfg.with_(use_hull=False, gamma=None)
    out = np.empty(len(evidence), dtype=np.int64)
    for i, ev in enumerate(evidence):
        out[i] = decide(ev, reference, plain).candidate
    return out


def calibrate_gammas(reference, evidence, cfg, predicted=None):
    """Per-layer hull thresholds: the ``cfg.gamma_quantile`` of held-out distances."""
    if len(evidence) == 0:
        raise ValueError("held-out set is empty")
    if predicted is None:
        predicted = predicted_classes(evidence, reference, cfg)
    dists = np.array([point_hull_distances(ev, reference, int(c)) for ev, c in zip(evidence, predicted)])
    if cfg.gamma_quantile >= 1.0:
        return dists.max(axis=0)
    return np.quantile(dists, cfg.gamma_quantile, axis=0, method="inverted_cdf")


def pass_rate(evidence, reference, cfg, gammas=None, alpha=None):
    verdicts = [decide(ev, reference, cfg, gammas, alpha) for ev in evidence]
    return float(np.mean([v.accepted for v in verdicts]))


@dataclass
class AlphaCalibration:
    alpha: float
    pass_rate: float
    feasible: bool
    history: list


def calibrate_alpha(evidence, reference, cfg, target_pass=0.965, gammas=None, tol=0.005,
                    lo=1e-12, hi=1.0 - 1e-9, max_iter=60):
    """Largest ``alpha`` whose pass rate on ``evidence`` is within ``tol`` of the target.

    Bisection on ``log(alpha)`` assuming the pass rate grows with ``alpha``;
    once a feasible point is found the search continues upward to find the
    largest feasible value.
    """
    if len(evidence) == 0:
        raise ValueError("held-out set is empty")
    history = []

    def rate(a):
        r = pass_rate(evidence, reference, cfg, gammas, a)
        history.append((a, r))
        return r

    r_hi = rate(hi)
    if abs(r_hi - target_pass) <= tol:
        return AlphaCalibration(hi, r_hi, True, history)
    if r_hi < target_pass - tol:
        return AlphaCalibration(hi, r_hi, False, history)
    r_lo = rate(lo)
    if abs(r_lo - target_pass) <= tol and r_lo >= r_hi:
        return AlphaCalibration(lo, r_lo, True, history)

    a_lo, a_hi = lo, hi
    best = None
    for _ in range(max_iter):
        mid = math.exp(0.5 * (math.log(a_lo) + math.log(a_hi)))
        r = rate(mid)
        if abs(r - target_pass) <= tol:
            if best is None or mid > best[0]:
                best = (mid, r)
            a_lo = mid
        elif r < target_pass:
            a_lo = mid
        else:
            a_hi = mid
        if best is not None and a_hi / a_lo < 1.0 + 1e-6:
            break
    if best is None:
        a, r = min(history, key=lambda h: abs(h[1] - target_pass))
        return AlphaCalibration(a, r, False, history)
    return AlphaCalibration(best[0], best[1], True, history)


@dataclass
class NPCalibration:
    weights: tuple
    omega: float
    objective: float
    s_type1: float
    c_type1: float
    feasible: bool
    table: list


def _np_terms(verdicts, y, is_id):
    accepted = np.array([v.accepted for v in verdicts])
    y = np.asarray(y)
    is_id = np.asarray(is_id, dtype=bool)
    n = accepted.size
    s_type2 = float(np.sum(~accepted & is_id)) / n
    s_type1 = float(np.sum(accepted & ~is_id)) / n
    n_acc = int(accepted.sum())
    if n_acc == 0:
        return s_type2, s_type1, 0.0, 0.0
    pred = np.array([v.decision if v.accepted else -1 for v in verdicts])
    acc_id = accepted & is_id
    wrong = acc_id & (pred != y)
    c_err = float(np.sum(wrong)) / n_acc
    # type I of the C-step: a confident wrong label on an accepted point
    c_type1 = c_err
    return s_type2, s_type1, c_err, c_type1


def np_calibrate(reference, activations, y, is_id, grid, cfg, epsilon=0.0, gammas=None):
    """Pick layer weights and ``omega`` from ``grid`` by the constrained empirical risk.

    The objective for a grid point ``(w, omega)`` is
    ``omega * (rejected ID / n) + (1 - omega) * (errors among accepted)``.
    Grid points whose selection false-accept rate or classification error
    reaches ``alpha + epsilon`` are infeasible. When nothing is feasible
    the point with the smallest total violation is returned with
    ``feasible=False``.

    Parameters
    ----------
    grid : sequence of (weights, omega)
    activations : list of ``(n, D_l)`` arrays for the labelled calibration points.
    y : array-like
        Class labels (ignored for OOD points).
    is_id : array-like of bool
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty calibration grid")
    if len(y) == 0:
        raise ValueError("calibration set is empty")
    is_id = np.asarray(is_id, dtype=bool)
    if is_id.all() or not is_id.any():
        raise ValueError("calibration needs both in- and out-of-distribution points")
    evidence = collect_evidence(reference, activations, cfg)
    bound = cfg.alpha + epsilon
    table = []
    for weights, omega in grid:
        c = cfg.with_(weights=None if weights is None else tuple(weights), omega=float(omega))
        verdicts = [decide(ev, reference, c, gammas) for ev in evidence]
        s2, s1, c_err, c1 = _np_terms(verdicts, y, is_id)
        objective = c.omega * s2 + (1.0 - c.omega) * c_err
        violation = max(0.0, s1 - bound + 1e-15) + max(0.0, c1 - bound + 1e-15)
        table.append({
            "weights": c.weights, "omega": c.omega, "objective": objective,
            "s_type1": s1, "c_type1": c1, "feasible": s1 < bound and c1 < bound,
            "violation": violation,
        })
    feasible = [row for row in table if row["feasible"]]
    if feasible:
        best = min(feasible, key=lambda r: r["objective"])
    else:
        best = min(table, key=lambda r: (r["violation"], r["objective"]))
    return NPCalibration(best["weights"], best["omega"], best["objective"], best["s_type1"],
                         best["c_type1"], bool(best["feasible"]), table)
