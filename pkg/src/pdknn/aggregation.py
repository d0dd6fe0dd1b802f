"""Per-layer p-value / effect tensors, FDR correction and aggregation.

Tensors are ``(L, C, C)`` arrays. Entry ``[l, c1, c2]`` of the p-value
tensor is the p-value of "class ``c2`` is strictly closer than ``c1``" at
layer ``l``; the effect tensor holds the matching effect size (positive
when ``c2`` is closer). Diagonals are fixed at p = 1, e = 0.
"""

import numpy as np

from .stats import fdr_two_stage

MISSING_FILLS = ("conservative", "absent_farther")


def init_tensors(n_layers, n_classes):
    """Fresh tensors: every p-value 1, every effect 0."""
    return np.ones((n_layers, n_classes, n_classes)), np.zeros((n_layers, n_classes, n_classes))


def _off_diagonal(n_classes):
    return ~np.eye(n_classes, dtype=bool)


def fill_layer(ptensor, etensor, layer, pairwise=None, present=None, fill_p=None,
               fill_e=None, missing="conservative"):
    """Write one layer's slab in place and return the tensors.

    Either pass ``pairwise``, a mapping ``(c1, c2) -> (p, effect)`` for the
    tested ordered pairs, or scalar ``fill_p`` / ``fill_e`` applied to every
    off-diagonal entry.

    Pairs not covered by ``pairwise`` involve a class without a test. With
    ``missing="conservative"`` they get p = 1, e = 0. With
    ``missing="absent_farther"`` a class listed in ``present`` is taken to
    be closer than any class absent from the neighborhood: entry
    ``[absent, present]`` gets p = 0, everything else p = 1, effects 0.
    """
    n_layers, n_classes, _ = ptensor.shape
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range for {n_layers} layers")
    off = _off_diagonal(n_classes)
    p_slab = np.ones((n_classes, n_classes))
    e_slab = np.zeros((n_classes, n_classes))

    if pairwise is None:
        if fill_p is None:
            raise ValueError("need pairwise results or a scalar fill")
        p_slab[off] = float(fill_p)
        e_slab[off] = 0.0 if fill_e is None else float(fill_e)
    else:
        if missing not in MISSING_FILLS:
            raise ValueError(f"unknown missing-class fill {missing!r}")
        if missing == "absent_farther" and present is not None:
            present_mask = np.zeros(n_classes, dtype=bool)
            present_mask[list(present)] = True
            p_slab[np.ix_(~present_mask, present_mask)] = 0.0
        for (c1, c2), (p, e) in pairwise.items():
            p_slab[c1, c2] = p
            e_slab[c1, c2] = e

    np.fill_diagonal(p_slab, 1.0)
    np.fill_diagonal(e_slab, 0.0)
    ptensor[layer] = p_slab
    etensor[layer] = e_slab
    return ptensor, etensor


def correct(ptensor, alpha, method="bky"):
    """Two-stage FDR over all off-diagonal entries of all layers as one family."""
    out = np.array(ptensor, dtype=float, copy=True)
    off = np.broadcast_to(_off_diagonal(out.shape[1]), out.shape)
    out[off] = fdr_two_stage(out[off], alpha, method=method)
    return out


def normalize_weights(weights, n_layers=None):
    """Project nonnegative layer weights onto the simplex. ``None`` means uniform."""
    if weights is None:
        if n_layers is None:
            raise ValueError("n_layers required for uniform weights")
        return np.full(n_layers, 1.0 / n_layers)
    w = np.asarray(weights, dtype=float).ravel()
    if n_layers is not None and w.size != n_layers:
        raise ValueError(f"{w.size} weights for {n_layers} layers")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ValueError("weights must be finite, nonnegative and not all zero")
    return w / w.sum()


def combination_factor(weights):
    """Multiplier ``min(2, 1 / max(w))`` that keeps a weighted mean of p-values valid."""
    return min(2.0, 1.0 / float(np.max(weights)))


def aggregate_layers(ptensor, weights=None):
    """Collapse layers into a ``(C, C)`` matrix of p-values."""
    ptensor = np.asarray(ptensor, dtype=float)
    w = normalize_weights(weights, ptensor.shape[0])
    merged = np.tensordot(w, ptensor, axes=1) * combination_factor(w)
    merged = np.minimum(merged, 1.0)
    np.fill_diagonal(merged, 1.0)
    return merged


def aggregate_classes(matrix, transpose=False):
    """Per-class p-values: twice the mean of each column's off-diagonal entries, clipped to 1.

    Column ``c`` collects the evidence that ``c`` is closer than each
    alternative. ``transpose=True`` reads rows instead.
    """
    m = np.asarray(matrix, dtype=float)
    if transpose:
        m = m.T
    n = m.shape[0]
    if n < 2:
        return np.zeros(n)
    off = _off_diagonal(n)
    col_means = np.where(off, m, 0.0).sum(axis=0) / (n - 1)
    return np.minimum(2.0 * col_means, 1.0)


def aggregate_effects(etensor, weights=None, transpose=False):
    """Per-class effect: weighted mean over layers, then plain mean down each column."""
    etensor = np.asarray(etensor, dtype=float)
    w = normalize_weights(weights, etensor.shape[0])
    merged = np.tensordot(w, etensor, axes=1)
    if transpose:
        merged = merged.T
    n = merged.shape[0]
    if n < 2:
        return np.zeros(n)
    off = _off_diagonal(n)
    return np.where(off, merged, 0.0).sum(axis=0) / (n - 1)
