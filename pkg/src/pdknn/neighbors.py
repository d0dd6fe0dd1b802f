"""Exact L2 k-nearest-neighbor search over reference activations."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NeighborReport:
    """k nearest references of one query: ascending distances, labels, row indices."""

    distances: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


class LayerIndex:
    """Immutable brute-force index over one layer's reference matrix.

    Parameters
    ----------
    matrix : array-like of shape (V, D)
        Reference activations.
    labels : array-like of shape (V,)
        Integer class ids.
    layer_name : str
        Identifier used in error messages.
    """

    def __init__(self, matrix, labels, layer_name="layer"):
        matrix = np.array(matrix, dtype=float)
        if matrix.ndim == 1:
            matrix = matrix[:, None]
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ValueError(f"{layer_name}: matrix must be 2-D with at least one row")
        labels = np.array(labels).ravel()
        if labels.shape[0] != matrix.shape[0]:
            raise ValueError(
                f"{layer_name}: dimension mismatch, {labels.shape[0]} labels for {matrix.shape[0]} rows"
            )
        if not np.all(np.isfinite(matrix)):
            raise ValueError(f"{layer_name}: matrix contains non-finite entries")
        if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
            raise ValueError(f"{layer_name}: labels must be nonnegative integers")
        labels = labels.astype(np.int64)
        matrix.setflags(write=False)
        labels.setflags(write=False)
        self.matrix = matrix
        self.labels = labels
        self.layer_name = layer_name

    @property
    def n_references(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def _check(self, points, k):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        if points.shape[1] != self.dim:
            raise ValueError(
                f"{self.layer_name}: dimension mismatch, query has {points.shape[1]} "
                f"features, index has {self.dim}"
            )
        k = int(k)
        if k < 1:
            raise ValueError("k must be positive")
        if k > self.n_references:
            raise ValueError(f"k={k} exceeds the {self.n_references} references")
        return points, k

    def squared_distances(self, points):
        """Squared distances from each row of ``points`` to every reference."""
        points, _ = self._check(points, 1)
        diff = points[:, None, :] - self.matrix[None, :, :]
        return (diff * diff).sum(axis=2)

    def query_batch(self, points, k, chunk=256):
        """Top-k neighbors for each query row.

        Returns ``(distances, labels, indices)`` arrays of shape (Q, k).
        Ties are broken by the smaller reference index.
        """
        points, k = self._check(points, k)
        q = points.shape[0]
        out_d = np.empty((q, k))
        out_i = np.empty((q, k), dtype=np.int64)
        v = self.n_references
        for start in range(0, q, chunk):
            block = points[start:start + chunk]
            # exact differences, not the ||a||^2 - 2ab + ||b||^2 expansion: ties must be exact
            diff = block[:, None, :] - self.matrix[None, :, :]
            sq = (diff * diff).sum(axis=2)
            if k < v:
                part = np.argpartition(sq, k - 1, axis=1)[:, :k]
                kth = np.take_along_axis(sq, part, axis=1).max(axis=1)
                # pull in every reference tied with the k-th value so the index tie-break is exact
                cand_mask = sq <= kth[:, None]
            else:
                cand_mask = np.ones_like(sq, dtype=bool)
            for r in range(block.shape[0]):
                cand = np.flatnonzero(cand_mask[r])
                order = np.lexsort((cand, sq[r, cand]))[:k]
                idx = cand[order]
                out_i[start + r] = idx
                out_d[start + r] = sq[r, idx]
        return np.sqrt(out_d), self.labels[out_i], out_i

    def query(self, point, k):
        """Report of the ``k`` nearest references to a single point."""
        point = np.asarray(point, dtype=float)
        if point.ndim != 1:
            raise ValueError("query expects a single 1-D point")
        d, lab, idx = self.query_batch(point, k)
        return NeighborReport(distances=d[0], labels=lab[0], indices=idx[0])


def build(matrix, labels, layer_name="layer"):
    return LayerIndex(matrix, labels, layer_name)


def query(index, point, k):
    return index.query(point, k)
