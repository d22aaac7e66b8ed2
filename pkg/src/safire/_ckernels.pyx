# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Semantics mirror ``safire._pykernels``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def label_components(const unsigned char[:, ::1] mask):
    """4-connected components of equal value, ids in raster-first-pixel order.

    Returns ``(labels int32 (H, W), count, values uint8 (count,))``.
    """
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t n = h * w
    labels_arr = np.full((h, w), -1, dtype=np.int32)
    cdef int[:, ::1] labels = labels_arr
    stack_arr = np.empty(n if n > 0 else 1, dtype=np.intp)
    cdef Py_ssize_t[::1] stack = stack_arr
    values_list = []
    cdef Py_ssize_t i, j, p, top, r, c
    cdef int cur = 0
    cdef unsigned char v
    for i in range(h):
        for j in range(w):
            if labels[i, j] != -1:
                continue
            v = mask[i, j]
            labels[i, j] = cur
            top = 0
            stack[top] = i * w + j
            top += 1
            while top > 0:
                top -= 1
                p = stack[top]
                r = p // w
                c = p - r * w
                if r > 0 and labels[r - 1, c] == -1 and mask[r - 1, c] == v:
                    labels[r - 1, c] = cur
                    stack[top] = p - w
                    top += 1
                if r + 1 < h and labels[r + 1, c] == -1 and mask[r + 1, c] == v:
                    labels[r + 1, c] = cur
                    stack[top] = p + w
                    top += 1
                if c > 0 and labels[r, c - 1] == -1 and mask[r, c - 1] == v:
                    labels[r, c - 1] = cur
                    stack[top] = p - 1
                    top += 1
                if c + 1 < w and labels[r, c + 1] == -1 and mask[r, c + 1] == v:
                    labels[r, c + 1] = cur
                    stack[top] = p + 1
                    top += 1
            values_list.append(v)
            cur += 1
    return labels_arr, cur, np.asarray(values_list, dtype=np.uint8)


def adjacency_pairs(const int[:, ::1] labels):
    """Unique ``(a, b)`` pairs, a < b, of distinct ids touching under 8-adjacency."""
    cdef Py_ssize_t h = labels.shape[0], w = labels.shape[1]
    out_arr = np.empty((4 * h * w + 1, 2), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, m = 0, k
    cdef int a, b
    cdef int di[4]
    cdef int dj[4]
    di[0] = 0; dj[0] = 1
    di[1] = 1; dj[1] = -1
    di[2] = 1; dj[2] = 0
    di[3] = 1; dj[3] = 1
    for i in range(h):
        for j in range(w):
            a = labels[i, j]
            for k in range(4):
                if i + di[k] >= h or j + dj[k] < 0 or j + dj[k] >= w:
                    continue
                b = labels[i + di[k], j + dj[k]]
                if a == b:
                    continue
                if a < b:
                    out[m, 0] = a
                    out[m, 1] = b
                else:
                    out[m, 0] = b
                    out[m, 1] = a
                m += 1
    if m == 0:
        return np.empty((0, 2), dtype=np.int32)
    # one int64 key per pair keeps the dedup a flat sort
    pairs = out_arr[:m].astype(np.int64)
    n = int(pairs.max()) + 1
    keys = np.unique(pairs[:, 0] * n + pairs[:, 1])
    return np.stack([keys // n, keys % n], axis=1).astype(np.int32)


def majority_downsample(const int[:, ::1] labels, int k, int n_labels):
    """Per k x k cell majority label; ties go to the smaller label."""
    cdef Py_ssize_t h = labels.shape[0] // k, w = labels.shape[1] // k
    out_arr = np.empty((h, w), dtype=np.int32)
    cdef int[:, ::1] out = out_arr
    counts_arr = np.zeros(n_labels, dtype=np.intp)
    cdef Py_ssize_t[::1] counts = counts_arr
    cdef Py_ssize_t ci, cj, i, j, best_n
    cdef int lab, best
    for ci in range(h):
        for cj in range(w):
            for lab in range(n_labels):
                counts[lab] = 0
            for i in range(ci * k, ci * k + k):
                for j in range(cj * k, cj * k + k):
                    counts[labels[i, j]] += 1
            best = 0
            best_n = counts[0]
            for lab in range(1, n_labels):
                if counts[lab] > best_n:
                    best = lab
                    best_n = counts[lab]
            out[ci, cj] = best
    return out_arr


from libc.math cimport exp, log


def r2r_anchor_loss(const double[:, ::1] sim, const Py_ssize_t[::1] region,
                    const Py_ssize_t[::1] size, double tau):
    """Region-to-region InfoNCE from a cell similarity matrix.

    ``region[i]`` is the region index of cell i and ``size[i]`` the cell
    count of that region. Returns ``(loss, d_sim)`` averaged over anchors
    (cells whose region has at least two cells), or ``None`` without anchors.
    """
    cdef Py_ssize_t n = sim.shape[0]
    cdef Py_ssize_t q, j, n_anchor = 0
    for q in range(n):
        if size[q] >= 2:
            n_anchor += 1
    if n_anchor == 0:
        return None
    dsim_arr = np.zeros((n, n), dtype=np.float64)
    cdef double[:, ::1] dsim = dsim_arr
    cdef double total = 0.0, pos, mx, z, e0, coef, inv_tau = 1.0 / tau
    cdef double scale = 1.0 / n_anchor
    cdef Py_ssize_t rq
    for q in range(n):
        if size[q] < 2:
            continue
        rq = region[q]
        pos = 0.0
        mx = -1e300
        for j in range(n):
            if region[j] == rq:
                if j != q:
                    pos += sim[q, j]
            elif sim[q, j] * inv_tau > mx:
                mx = sim[q, j] * inv_tau
        pos = pos / (size[q] - 1) * inv_tau
        if pos > mx:
            mx = pos
        e0 = exp(pos - mx)
        z = e0
        for j in range(n):
            if region[j] != rq:
                dsim[q, j] = exp(sim[q, j] * inv_tau - mx)
                z += dsim[q, j]
        total += log(z) + mx - pos
        coef = (e0 / z - 1.0) * inv_tau / (size[q] - 1) * scale
        for j in range(n):
            if region[j] == rq:
                if j != q:
                    dsim[q, j] = coef
            else:
                dsim[q, j] = dsim[q, j] / z * inv_tau * scale
    return total * scale, dsim_arr


from libc.math cimport log1p, fabs


def aass_fused(const double[:, ::1] x, const signed char[:, ::1] yp, double w1, double w0):
    """One pass of weighted BCE over non-ignored pixels.

    Returns ``(weighted_nll_sum, d_x_unscaled, n_correct, n_valid)``; the
    caller divides the sum and the gradient by ``n_valid``.
    """
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], i, j
    grad_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    cdef double total = 0.0, row, v, sp, sig, e
    cdef Py_ssize_t correct = 0, valid = 0
    cdef signed char y
    for i in range(h):
        row = 0.0
        for j in range(w):
            y = yp[i, j]
            if y < 0:
                continue
            valid += 1
            v = x[i, j]
            e = exp(-fabs(v))
            # -log sigmoid(v) = softplus(-v); -log(1 - sigmoid(v)) = softplus(v)
            sp = log1p(e)
            sig = 1.0 / (1.0 + e) if v >= 0 else e / (1.0 + e)
            if y == 1:
                row += w1 * (sp + (-v if v < 0 else 0.0))
                grad[i, j] = -w1 * (1.0 - sig)
                if v > 0:
                    correct += 1
            else:
                row += w0 * (sp + (v if v > 0 else 0.0))
                grad[i, j] = w0 * sig
                if v <= 0:
                    correct += 1
        total += row
    return total, grad_arr, correct, valid
