"""Pure numpy implementations of the hot kernels.

This is the fallback backend; `ripu._kernels._core` is the compiled twin
with identical signatures.  Everything here is O(H*W*C) independent of the
window half-width k, thanks to summed-area tables.
"""

import heapq

import numpy as np


def _window_edges(n, k):
    """Clipped inclusive window bounds [lo, hi] for every index of an axis."""
    idx = np.arange(n)
    lo = np.maximum(idx - k, 0)
    hi = np.minimum(idx + k, n - 1)
    return lo, hi


def region_sizes(height, width, k):
    """Pixel count of the border-clipped (2k+1)-square window at every pixel."""
    rlo, rhi = _window_edges(height, k)
    clo, chi = _window_edges(width, k)
    rows = (rhi - rlo + 1).astype(np.int32)
    cols = (chi - clo + 1).astype(np.int32)
    return rows[:, None] * cols[None, :]


def _sat_window_reduce(sat, k):
    """4-corner difference of a zero-padded summed-area table, clipped windows."""
    height, width = sat.shape[0] - 1, sat.shape[1] - 1
    rlo, rhi = _window_edges(height, k)
    clo, chi = _window_edges(width, k)
    return (
        sat[np.ix_(rhi + 1, chi + 1)]
        - sat[np.ix_(rlo, chi + 1)]
        - sat[np.ix_(rhi + 1, clo)]
        + sat[np.ix_(rlo, clo)]
    )


def window_sums(field, k):
    """Sum of `field` over the clipped (2k+1)-square window at every pixel."""
    field = np.asarray(field, dtype=np.float64)
    height, width = field.shape
    sat = np.zeros((height + 1, width + 1), dtype=np.float64)
    np.cumsum(field, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    return _sat_window_reduce(sat, k)


def label_window_counts(labels, k, classes):
    """Per-pixel, per-class label counts over clipped square windows.

    One summed-area table per class; returns (counts int32 (H, W, C),
    region_size int32 (H, W)).
    """
    height, width = labels.shape
    counts = np.empty((height, width, classes), dtype=np.int32)
    sat = np.zeros((height + 1, width + 1), dtype=np.int32)
    for c in range(classes):
        ind = (labels == c).astype(np.int32)
        np.cumsum(ind, axis=0, out=sat[1:, 1:])
        np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
        counts[:, :, c] = _sat_window_reduce(sat, k)
    return counts, region_sizes(height, width, k)


def entropy_map(probs):
    """Per-pixel entropy -sum_c p ln p with the 0 ln 0 = 0 convention."""
    height, width, classes = probs.shape
    out = np.zeros((height, width), dtype=np.float64)
    for c in range(classes):
        p = np.asarray(probs[:, :, c], dtype=np.float64)
        out -= p * np.log(np.where(p > 0.0, p, 1.0))
    return out


def impurity_map(counts, region_size):
    """Entropy of the class-count fractions at every pixel, 0 ln 0 = 0."""
    height, width, classes = counts.shape
    size = np.asarray(region_size, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.float64)
    for c in range(classes):
        p = counts[:, :, c] / size
        out -= p * np.log(np.where(p > 0.0, p, 1.0))
    return out


def greedy_select(score, eligible, cost, k, budget):
    """Budgeted greedy argmax with spacing and lazy invalidation.

    Repeatedly takes the highest-scoring eligible pixel (ties broken
    row-major) whose cost fits the remaining budget, then blocks every
    center within Chebyshev distance 2k of it.  If no candidate fits, the
    best-scoring candidate overall is taken once (overshoot) and selection
    stops.  Implemented as a max-heap with lazy validity checks; must stay
    pick-for-pick identical to a repeated full-scan greedy.

    Returns (picks, spent, shortfall) where picks is an ordered list of
    (i, j) centers.
    """
    height, width = score.shape
    flat_score = score.ravel()
    heap = [(-flat_score[idx], idx) for idx in np.flatnonzero(eligible.ravel())]
    heapq.heapify(heap)

    blocked = np.zeros((height, width), dtype=bool)
    cost = np.asarray(cost)
    deferred = []  # popped in global (score desc, row-major) order
    picks = []
    spent = 0
    reach = 2 * k

    def block(i, j):
        blocked[max(0, i - reach): i + reach + 1, max(0, j - reach): j + reach + 1] = True

    while spent < budget:
        chosen = -1
        while heap:
            _, idx = heapq.heappop(heap)
            i, j = divmod(idx, width)
            if blocked[i, j]:
                continue
            if cost[i, j] <= budget - spent:
                chosen = idx
                break
            deferred.append(idx)
        if chosen < 0:
            for idx in deferred:
                i, j = divmod(idx, width)
                if not blocked[i, j]:
                    chosen = idx
                    break
            if chosen < 0:
                return picks, spent, True
        i, j = divmod(chosen, width)
        picks.append((i, j))
        spent += int(cost[i, j])
        block(i, j)
    return picks, spent, False
