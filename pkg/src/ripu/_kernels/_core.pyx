# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ripu._kernels._py: same functions, same semantics.

Summed-area tables give O(H*W*C) histograms independent of the window
half-width; the greedy selector is a hand-rolled binary max-heap with lazy
invalidation, pick-for-pick identical to the repeated full-scan greedy.
"""

from libc.math cimport log, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()


def region_sizes(Py_ssize_t height, Py_ssize_t width, Py_ssize_t k):
    """Pixel count of the border-clipped (2k+1)-square window at every pixel."""
    out = np.empty((height, width), dtype=np.int32)
    cdef int[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef int rows, cols
    for i in range(height):
        rows = <int> (min(i + k, height - 1) - max(i - k, 0) + 1)
        for j in range(width):
            cols = <int> (min(j + k, width - 1) - max(j - k, 0) + 1)
            o[i, j] = rows * cols
    return out


def window_sums(field, Py_ssize_t k):
    """Sum of `field` over the clipped (2k+1)-square window at every pixel."""
    cdef const double[:, ::1] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef Py_ssize_t height = f.shape[0], width = f.shape[1]
    sat_arr = np.zeros((height + 1, width + 1), dtype=np.float64)
    cdef double[:, ::1] sat = sat_arr
    out = np.empty((height, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, r0, r1, c0, c1
    cdef double rowsum
    for i in range(height):
        rowsum = 0.0
        for j in range(width):
            rowsum += f[i, j]
            sat[i + 1, j + 1] = sat[i, j + 1] + rowsum
    for i in range(height):
        r0 = i - k if i - k > 0 else 0
        r1 = i + k if i + k < height - 1 else height - 1
        for j in range(width):
            c0 = j - k if j - k > 0 else 0
            c1 = j + k if j + k < width - 1 else width - 1
            o[i, j] = sat[r1 + 1, c1 + 1] - sat[r0, c1 + 1] - sat[r1 + 1, c0] + sat[r0, c0]
    return out


def label_window_counts(labels, Py_ssize_t k, Py_ssize_t classes):
    """Per-pixel, per-class label counts over clipped square windows."""
    cdef const unsigned short[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.uint16)
    cdef Py_ssize_t height = lab.shape[0], width = lab.shape[1]
    counts_arr = np.empty((height, width, classes), dtype=np.int32)
    cdef int[:, :, ::1] counts = counts_arr
    sat_arr = np.zeros((height + 1, width + 1), dtype=np.int32)
    cdef int[:, ::1] sat = sat_arr
    cdef Py_ssize_t c, i, j, r0, r1, c0, c1
    cdef int rowsum
    for c in range(classes):
        for i in range(height):
            rowsum = 0
            for j in range(width):
                if lab[i, j] == c:
                    rowsum += 1
                sat[i + 1, j + 1] = sat[i, j + 1] + rowsum
        for i in range(height):
            r0 = i - k if i - k > 0 else 0
            r1 = i + k if i + k < height - 1 else height - 1
            for j in range(width):
                c0 = j - k if j - k > 0 else 0
                c1 = j + k if j + k < width - 1 else width - 1
                counts[i, j, c] = (
                    sat[r1 + 1, c1 + 1] - sat[r0, c1 + 1] - sat[r1 + 1, c0] + sat[r0, c0]
                )
    return counts_arr, region_sizes(height, width, k)


def entropy_map(probs):
    """Per-pixel entropy -sum_c p ln p with the 0 ln 0 = 0 convention."""
    cdef const double[:, :, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef Py_ssize_t height = p.shape[0], width = p.shape[1], classes = p.shape[2]
    out = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, c
    cdef double acc, v
    for i in range(height):
        for j in range(width):
            acc = 0.0
            for c in range(classes):
                v = p[i, j, c]
                if v > 0.0:
                    acc -= v * log(v)
            o[i, j] = acc
    return out


def impurity_map(counts, region_size):
    """Entropy of the class-count fractions at every pixel, 0 ln 0 = 0."""
    cdef const int[:, :, ::1] n = np.ascontiguousarray(counts, dtype=np.int32)
    cdef const int[:, ::1] size = np.ascontiguousarray(region_size, dtype=np.int32)
    cdef Py_ssize_t height = n.shape[0], width = n.shape[1], classes = n.shape[2]
    out = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, c
    cdef double acc, p, inv
    for i in range(height):
        for j in range(width):
            inv = 1.0 / size[i, j]
            acc = 0.0
            for c in range(classes):
                if n[i, j, c] > 0:
                    p = n[i, j, c] * inv
                    acc -= p * log(p)
            o[i, j] = acc
    return out


cdef inline bint _heap_before(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) noexcept:
    # max-heap order: higher score first, row-major index breaking ties
    if sa != sb:
        return sa > sb
    return ia < ib


cdef void _sift_down(double* hs, Py_ssize_t* hi, Py_ssize_t n, Py_ssize_t root) noexcept:
    cdef Py_ssize_t child
    cdef double s = hs[root]
    cdef Py_ssize_t idx = hi[root]
    while True:
        child = 2 * root + 1
        if child >= n:
            break
        if child + 1 < n and _heap_before(hs[child + 1], hi[child + 1], hs[child], hi[child]):
            child += 1
        if _heap_before(hs[child], hi[child], s, idx):
            hs[root] = hs[child]
            hi[root] = hi[child]
            root = child
        else:
            break
    hs[root] = s
    hi[root] = idx


def greedy_select(score, eligible, cost, Py_ssize_t k, long long budget):
    """Budgeted greedy argmax with spacing constraints; see the numpy twin."""
    cdef const double[:, ::1] s = np.ascontiguousarray(score, dtype=np.float64)
    cdef const cnp.uint8_t[:, ::1] elig = np.ascontiguousarray(eligible, dtype=np.uint8)
    cdef const long long[:, ::1] c = np.ascontiguousarray(cost, dtype=np.int64)
    cdef Py_ssize_t height = s.shape[0], width = s.shape[1]

    heap_scores = np.empty(height * width, dtype=np.float64)
    heap_idx = np.empty(height * width, dtype=np.intp)
    cdef double[::1] hs = heap_scores
    cdef Py_ssize_t[::1] hi = heap_idx
    cdef Py_ssize_t n = 0
    cdef Py_ssize_t i, j
    for i in range(height):
        for j in range(width):
            if elig[i, j]:
                hs[n] = s[i, j]
                hi[n] = i * width + j
                n += 1
    # bottom-up heapify
    cdef Py_ssize_t start
    for start in range(n // 2 - 1, -1, -1):
        _sift_down(&hs[0], &hi[0], n, start)

    blocked_arr = np.zeros((height, width), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] blocked = blocked_arr
    deferred_arr = np.empty(height * width, dtype=np.intp)
    cdef Py_ssize_t[::1] deferred = deferred_arr
    cdef Py_ssize_t n_deferred = 0

    picks = []
    cdef long long spent = 0
    cdef Py_ssize_t reach = 2 * k
    cdef Py_ssize_t chosen, idx, d, r0, r1, c0, c1, u, v
    cdef bint shortfall = False

    while spent < budget:
        chosen = -1
        while n > 0:
            idx = hi[0]
            # pop root
            n -= 1
            hs[0] = hs[n]
            hi[0] = hi[n]
            if n > 0:
                _sift_down(&hs[0], &hi[0], n, 0)
            i = idx // width
            j = idx % width
            if blocked[i, j]:
                continue
            if c[i, j] <= budget - spent:
                chosen = idx
                break
            deferred[n_deferred] = idx
            n_deferred += 1
        if chosen < 0:
            for d in range(n_deferred):
                idx = deferred[d]
                i = idx // width
                j = idx % width
                if not blocked[i, j]:
                    chosen = idx
                    break
            if chosen < 0:
                shortfall = True
                break
        i = chosen // width
        j = chosen % width
        picks.append((i, j))
        spent += c[i, j]
        r0 = i - reach if i - reach > 0 else 0
        r1 = i + reach if i + reach < height - 1 else height - 1
        c0 = j - reach if j - reach > 0 else 0
        c1 = j + reach if j + reach < width - 1 else width - 1
        for u in range(r0, r1 + 1):
            for v in range(c0, c1 + 1):
                blocked[u, v] = 1
    return picks, int(spent), bool(shortfall)
