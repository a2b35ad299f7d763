# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for winner statistics and greedy slot selection.

Semantics mirror ``_kernels_py`` exactly: lowest-index argmax ties,
stable descending-quality order, coverage re-evaluated from scratch
(ascending slot index, ascending token index) after each acceptance.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"


cdef inline Py_ssize_t _row_argmax(const double[:, ::1] a, Py_ssize_t t, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t i, best = 0
    cdef double bv = a[t, 0]
    for i in range(1, k):
        if a[t, i] > bv:
            bv = a[t, i]
            best = i
    return best


def winners(const double[:, ::1] a):
    """Per-token argmax over slots; ties go to the lowest slot index."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], t
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] w = out
    for t in range(n):
        w[t] = _row_argmax(a, t, k)
    return out


def quality_scores(const double[:, ::1] a, double eps):
    """Return (winners, winner_mass, total_mass, quality) for an N×K map."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], t, i
    w_np = np.empty(n, dtype=np.int64)
    wm_np = np.zeros(k, dtype=np.float64)
    tm_np = np.zeros(k, dtype=np.float64)
    q_np = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] w = w_np
    cdef double[::1] wm = wm_np
    cdef double[::1] tm = tm_np
    cdef double[::1] q = q_np
    cdef Py_ssize_t best
    for t in range(n):
        best = _row_argmax(a, t, k)
        w[t] = best
        wm[best] += a[t, best]
    for i in range(k):
        for t in range(n):
            tm[i] += a[t, i]
        q[i] = wm[i] / (tm[i] + eps)
    return w_np, wm_np, tm_np, q_np


cdef Py_ssize_t _recompute_covered(const double[:, ::1] a, const cnp.uint8_t[::1] mask,
                                   double tau, cnp.uint8_t[::1] covered) noexcept nogil:
    """Fill ``covered`` from scratch; returns the covered-token count."""
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], t, i, count = 0
    cdef double s
    for t in range(n):
        s = 0.0
        for i in range(k):
            if mask[i]:
                s += a[t, i]
        if s >= tau:
            covered[t] = 1
            count += 1
        else:
            covered[t] = 0
    return count


def covered_mask(const double[:, ::1] a, const cnp.uint8_t[::1] active, double tau):
    """Tokens whose cumulative mass from active slots reaches tau (>=)."""
    out = np.zeros(a.shape[0], dtype=np.uint8)
    cdef cnp.uint8_t[::1] covered = out
    cdef Py_ssize_t i, any_active = 0
    for i in range(active.shape[0]):
        if active[i]:
            any_active = 1
            break
    if any_active:
        _recompute_covered(a, active, tau, covered)
    return out


def greedy_select(const double[:, ::1] a, double tau, double rho, double mu,
                  double eps, bint order_by_quality, bint use_coverage):
    """Greedy descending-quality scan with coverage stop and novelty skip.

    Same return layout as the NumPy fallback: (mask, trace_slots,
    trace_quality, trace_novelty, trace_accepted, trace_coverage).
    """
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1]
    cdef Py_ssize_t t, i, j, pos, steps = 0, n_selected = 0, covered_count = 0
    cdef double nov, num, rate = 0.0

    _, _, tm_np, q_np = quality_scores(a, eps)
    cdef double[::1] tm = tm_np
    cdef double[::1] q = q_np

    order_np = np.empty(k, dtype=np.int64)
    cdef cnp.int64_t[::1] order = order_np
    for i in range(k):
        order[i] = i
    if order_by_quality:
        # insertion sort on (-quality, index); stable, so equal-quality
        # ties keep ascending slot order
        for j in range(1, k):
            i = order[j]
            pos = j
            while pos > 0 and q[order[pos - 1]] < q[i]:
                order[pos] = order[pos - 1]
                pos -= 1
            order[pos] = i

    mask_np = np.zeros(k, dtype=np.uint8)
    covered_np = np.zeros(n, dtype=np.uint8)
    ts_np = np.empty(k + 1, dtype=np.int64)
    tq_np = np.empty(k + 1, dtype=np.float64)
    tn_np = np.empty(k + 1, dtype=np.float64)
    ta_np = np.empty(k + 1, dtype=np.uint8)
    tc_np = np.empty(k + 1, dtype=np.float64)
    cdef cnp.uint8_t[::1] mask = mask_np
    cdef cnp.uint8_t[::1] covered = covered_np
    cdef cnp.int64_t[::1] ts = ts_np
    cdef double[::1] tq = tq_np
    cdef double[::1] tn = tn_np
    cdef cnp.uint8_t[::1] ta = ta_np
    cdef double[::1] tc = tc_np

    for j in range(k):
        i = order[j]
        num = 0.0
        for t in range(n):
            if covered[t]:
                num += a[t, i]
        nov = 1.0 - num / (tm[i] + eps)
        if use_coverage and nov < mu:
            ts[steps] = i
            tq[steps] = q[i]
            tn[steps] = nov
            ta[steps] = 0
            tc[steps] = rate
            steps += 1
            continue
        mask[i] = 1
        n_selected += 1
        covered_count = _recompute_covered(a, mask, tau, covered)
        rate = covered_count / <double>n
        ts[steps] = i
        tq[steps] = q[i]
        tn[steps] = nov
        ta[steps] = 1
        tc[steps] = rate
        steps += 1
        if use_coverage and rate >= rho:
            break

    if n_selected == 0:
        # defensive: unreachable for the first candidate (empty covered
        # set gives novelty 1), kept so the mask is never empty
        i = 0
        for j in range(1, k):
            if q[j] > q[i]:
                i = j
        mask[i] = 1
        covered_count = _recompute_covered(a, mask, tau, covered)
        rate = covered_count / <double>n
        ts[steps] = i
        tq[steps] = q[i]
        tn[steps] = 1.0
        ta[steps] = 1
        tc[steps] = rate
        steps += 1

    return (
        mask_np,
        ts_np[:steps].copy(),
        tq_np[:steps].copy(),
        tn_np[:steps].copy(),
        ta_np[:steps].copy(),
        tc_np[:steps].copy(),
    )
