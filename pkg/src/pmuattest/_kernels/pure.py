"""Pure numpy LOF kernels; fallback when the compiled extension is absent.

Both kernels share one neighborhood convention: a query is never a member
of its own neighborhood, so one zero-distance training point (the query
itself, when re-presented) is excluded from its candidate set.  Ties at the
k-distance are all included, so a neighborhood may exceed k points.

Reductions deliberately avoid BLAS calls so results are reproducible
run-to-run (np.sum is single-threaded and deterministic).
"""

from __future__ import annotations

import numpy as np

LARGE_LRD = 1e10


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def fit_structures(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Leave-self-out k-distance, lrd and LOF score for every training point.

    points: (n, d) float64, n >= k + 1.
    Returns (k_distance, lrd, lof_score), each shape (n,).
    """
    n = points.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    dist = _euclidean(points, points)
    np.fill_diagonal(dist, np.inf)

    kdist = np.partition(dist, k - 1, axis=1)[:, k - 1]
    member = dist <= kdist[:, None]
    sizes = member.sum(axis=1)

    # reach[i, j] = max(kdist[j], dist[i, j]); lrd = |N| / sum over N
    reach = np.maximum(kdist[None, :], dist)
    reach_sums = np.where(member, reach, 0.0).sum(axis=1)
    lrd = np.where(reach_sums > 0.0, sizes / np.where(reach_sums > 0.0, reach_sums, 1.0), LARGE_LRD)

    lrd_sums = np.where(member, lrd[None, :], 0.0).sum(axis=1)
    scores = lrd_sums / (sizes * lrd)
    return kdist, lrd, scores


def score_queries(
    points: np.ndarray,
    kdist: np.ndarray,
    lrd: np.ndarray,
    k: int,
    queries: np.ndarray,
) -> np.ndarray:
    """LOF scores of query rows against fitted training structures."""
    dist = _euclidean(queries, points)
    out = np.empty(dist.shape[0], dtype=np.float64)
    for qi in range(dist.shape[0]):
        d = dist[qi].copy()
        zero = np.flatnonzero(d == 0.0)
        if zero.size:
            d[zero[0]] = np.inf
        kq = np.partition(d, k - 1)[k - 1]
        member = d <= kq
        size = int(member.sum())
        reach_sum = float(np.maximum(kdist[member], d[member]).sum())
        lrd_q = size / reach_sum if reach_sum > 0.0 else LARGE_LRD
        out[qi] = float(lrd[member].sum()) / (size * lrd_q)
    return out
