"""Distance to the convex hull of a point set and threshold calibration."""

import logging

import numpy as np
from scipy.spatial import ConvexHull, QhullError

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-6
DEFAULT_MAX_ITER = 10_000
DEFAULT_MAX_POINTS = 2000
_PRUNE_MAX_DIM = 6


class HullSpec:
    """Points whose convex hull is queried, plus solver settings.

    In low dimension the point set is reduced to its hull vertices first;
    this does not change the hull, only the cost of each solver iteration.
    Sets larger than ``max_points`` are uniformly subsampled with ``seed``.
    """

    def __init__(self, points, tolerance=DEFAULT_TOLERANCE, max_iterations=DEFAULT_MAX_ITER,
                 max_points=DEFAULT_MAX_POINTS, seed=0, prune=True, method="wolfe"):
        points = np.array(points, dtype=float)
        if points.ndim == 1:
            points = points[None, :]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ValueError("hull needs at least one point")
        if not np.all(np.isfinite(points)):
            raise ValueError("hull points must be finite")
        if tolerance <= 0 or max_iterations < 1:
            raise ValueError("tolerance and max_iterations must be positive")
        if max_points is not None and points.shape[0] > max_points:
            rng = np.random.default_rng(seed)
            keep = np.sort(rng.choice(points.shape[0], size=max_points, replace=False))
            points = points[keep]
        if prune:
            points = _hull_vertices(points)
        points.setflags(write=False)
        self.points = points
        self.tolerance = float(tolerance)
        self.max_iterations = int(max_iterations)
        if method not in SOLVERS:
            raise ValueError(f"unknown solver {method!r}")
        self.method = method

    @property
    def dim(self):
        return self.points.shape[1]

    def distance(self, query):
        return hull_distance(self, query)


def _hull_vertices(points):
    # Reduce to hull vertices; flat sets are handled in their affine span.
    m, d = points.shape
    if m <= 2:
        return points
    centered = points - points.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    scale = sv[0] if sv.size and sv[0] > 0 else 1.0
    rank = int(np.sum(sv > 1e-10 * scale)) if sv.size and sv[0] > 0 else 0
    if rank == 0:
        return points[:1]
    if rank > _PRUNE_MAX_DIM or m <= rank + 1:
        return points
    coords = centered @ vt[:rank].T
    if rank == 1:
        keep = np.array([coords[:, 0].argmin(), coords[:, 0].argmax()])
    else:
        try:
            keep = ConvexHull(coords).vertices
        except (QhullError, ValueError):
            return points
    return points[np.unique(keep)]


def _affine_min(pts):
    # Minimum-norm point of the affine hull of the rows of pts: weights summing to 1.
    n = pts.shape[0]
    gram = pts @ pts.T
    system = np.zeros((n + 1, n + 1))
    system[:n, :n] = gram
    system[:n, n] = 1.0
    system[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    sol = np.linalg.lstsq(system, rhs, rcond=None)[0]
    return sol[:n]


def _wolfe(points, q, tol2, max_iterations):
    # Fully-corrective Frank-Wolfe (Wolfe's minimum-norm-point algorithm) on points - q.
    shifted = points - q
    sq = np.einsum("ij,ij->i", shifted, shifted)
    active = [int(np.argmin(sq))]
    lam = np.array([1.0])
    x = shifted[active[0]].copy()
    gap = np.inf
    for _ in range(max_iterations):
        scores = shifted @ x
        j = int(np.argmin(scores))
        xx = float(x @ x)
        gap = 2.0 * (xx - float(scores[j]))
        if gap <= tol2:
            return x + q, gap, True
        if j in active:
            return x + q, gap, False
        active.append(j)
        lam = np.append(lam, 0.0)
        while True:
            mu = _affine_min(shifted[active])
            if np.all(mu > 1e-14):
                lam = mu
                break
            shrink = mu < lam
            theta = np.min(lam[shrink] / (lam[shrink] - mu[shrink])) if np.any(shrink) else 1.0
            lam = lam + theta * (mu - lam)
            keep = lam > 1e-14
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            active = [a for a, k in zip(active, keep) if k]
            lam = lam[keep]
            lam = lam / lam.sum()
        x = lam @ shifted[active]
    return x + q, gap, False


def _away_step(points, q, tol2, max_iterations):
    m = points.shape[0]
    sq = np.einsum("ij,ij->i", points - q, points - q)
    start = int(np.argmin(sq))
    weights = np.zeros(m)
    weights[start] = 1.0
    x = points[start].copy()
    gap = np.inf
    for _ in range(max_iterations):
        g = 2.0 * (x - q)
        scores = points @ g
        s = int(np.argmin(scores))
        xg = float(x @ g)
        gap = xg - float(scores[s])
        if gap <= tol2:
            return x, gap, True
        active = np.flatnonzero(weights > 0)
        v = active[int(np.argmax(scores[active]))]
        away_gap = float(scores[v]) - xg
        if gap >= away_gap:
            d = points[s] - x
            step_max = 1.0
            toward = True
        else:
            d = x - points[v]
            wv = weights[v]
            step_max = wv / (1.0 - wv) if wv < 1.0 else np.inf
            toward = False
        dd = float(d @ d)
        if dd == 0.0:
            return x, gap, True
        step = min(max(-0.5 * float(g @ d) / dd, 0.0), step_max)
        if step == 0.0:
            return x, gap, False
        x = x + step * d
        if toward:
            weights *= 1.0 - step
            weights[s] += step
            if step == 1.0:
                weights[:] = 0.0
                weights[s] = 1.0
        else:
            weights *= 1.0 + step
            weights[v] -= step
            if step == step_max:
                weights[v] = 0.0
    return x, gap, False


SOLVERS = {"wolfe": _wolfe, "away": _away_step}


def min_norm_point(points, query, tolerance=DEFAULT_TOLERANCE, max_iterations=DEFAULT_MAX_ITER,
                   method="wolfe"):
    """Closest point of conv(points) to ``query`` by Frank-Wolfe iterations.

    Each iteration picks the vertex minimizing the linear model of
    ``||x - query||^2``. ``method="wolfe"`` then re-optimizes exactly over
    the active vertices (fully corrective, finite termination);
    ``method="away"`` takes a line-searched toward- or away-step instead.
    Stops once the Frank-Wolfe gap, an upper bound on the suboptimality of
    the squared distance, drops to ``tolerance**2``.

    Returns
    -------
    x : ndarray
        Approximate nearest point.
    gap : float
        Final duality gap.
    converged : bool
    """
    try:
        solver = SOLVERS[method]
    except KeyError:
        raise ValueError(f"unknown solver {method!r}") from None
    points = np.asarray(points, dtype=float)
    q = np.asarray(query, dtype=float)
    return solver(points, q, tolerance * tolerance, int(max_iterations))


def hull_distance(spec, query):
    """Euclidean distance from ``query`` to the hull described by ``spec``."""
    query = np.asarray(query, dtype=float).ravel()
    if query.shape[0] != spec.dim:
        raise ValueError(f"dimension mismatch: query has {query.shape[0]}, hull has {spec.dim}")
    x, gap, ok = min_norm_point(spec.points, query, spec.tolerance, spec.max_iterations,
                               spec.method)
    if not ok:
        logger.debug("hull solver stopped early with gap %.3g", gap)
    return float(np.linalg.norm(x - query))


def calibrate_gamma(hulls, activations, predicted, quantile=0.99):
    """Per-layer thresholds from held-out in-distribution points.

    Parameters
    ----------
    hulls : sequence of mapping class -> HullSpec
        One mapping per layer.
    activations : sequence of ndarray
        Held-out activations, one ``(n, D_l)`` array per layer.
    predicted : array-like of shape (n,)
        Class whose hull each held-out point is measured against.
    quantile : float in (0, 1]

    Returns
    -------
    ndarray of shape (L,)
    """
    if not 0 < quantile <= 1:
        raise ValueError("quantile must be in (0, 1]")
    predicted = np.asarray(predicted).ravel()
    if predicted.size == 0:
        raise ValueError("held-out set is empty")
    if len(hulls) != len(activations):
        raise ValueError("layer count mismatch between hulls and activations")
    gammas = np.empty(len(hulls))
    for layer, (layer_hulls, acts) in enumerate(zip(hulls, activations)):
        acts = np.asarray(acts, dtype=float)
        dists = np.array([hull_distance(layer_hulls[int(c)], a) for a, c in zip(acts, predicted)])
        gammas[layer] = np.quantile(dists, quantile, method="inverted_cdf") if quantile < 1 else dists.max()
    return gammas


def within_hulls(activations, hulls, gammas):
    """True iff the point is within ``gammas[l]`` of ``hulls[l]`` at every layer."""
    if len(activations) != len(hulls) or len(hulls) != len(gammas):
        raise ValueError("layer count mismatch")
    for act, spec, gamma in zip(activations, hulls, gammas):
        if hull_distance(spec, act) > gamma:
            return False
    return True
