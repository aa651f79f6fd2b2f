# cython: language_level=3
"""Compiled twins of ``hetplan._kernels.fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

ctypedef long long i64


def bucket_dp(ends, counts, int n_buckets):
    cdef Py_ssize_t k_total = len(ends)
    if k_total == 0:
        return 0, []
    cdef i64[::1] u = np.ascontiguousarray(ends, dtype=np.int64)
    cdef i64[::1] cnt = np.ascontiguousarray(counts, dtype=np.int64)
    cdef Py_ssize_t nb = min(n_buckets, k_total)
    cdef i64[::1] csum = np.zeros(k_total + 1, dtype=np.int64)
    cdef i64[::1] wsum = np.zeros(k_total + 1, dtype=np.int64)
    cdef Py_ssize_t i, j, e, k
    for k in range(k_total):
        csum[k + 1] = csum[k] + cnt[k]
        wsum[k + 1] = wsum[k] + cnt[k] * u[k]
    # -1 marks an unreachable state; padding itself is never negative
    cdef i64[:, ::1] suf = np.full((nb + 1, k_total + 1), -1, dtype=np.int64)
    suf[0, k_total] = 0
    cdef i64 best, v, tail, target
    for j in range(1, nb + 1):
        for i in range(k_total - j, -1, -1):
            best = -1
            for e in range(i, k_total - j + 1):
                tail = suf[j - 1, e + 1]
                if tail < 0:
                    continue
                v = u[e] * (csum[e + 1] - csum[i]) - (wsum[e + 1] - wsum[i]) + tail
                if best < 0 or v < best:
                    best = v
            suf[j, i] = best
    picks = []
    i = 0
    for j in range(nb, 0, -1):
        target = suf[j, i]
        for e in range(i, k_total - j + 1):
            tail = suf[j - 1, e + 1]
            if tail >= 0 and u[e] * (csum[e + 1] - csum[i]) - (wsum[e + 1] - wsum[i]) + tail == target:
                picks.append(e)
                i = e + 1
                break
    return int(suf[nb, 0]), picks


cdef double _group_time(double[:, ::1] units, i64[:, ::1] chunks, i64[:, ::1] d,
                        Py_ssize_t g, i64 p, i64 stages, i64 r) noexcept nogil:
    cdef double compute = 0.0
    cdef double bubble = 0.0
    cdef double c, full, tail, longest
    cdef i64 q, b, m, rem
    cdef Py_ssize_t j
    for j in range(r):
        q = (d[g, j] + p - 1) // p
        if q == 0:
            continue
        b = chunks[g, j]
        c = units[g, j]
        m = q // b
        rem = q - m * b
        full = <double>b * c
        tail = <double>rem * c
        compute += <double>m * full + tail
        longest = full if m else tail
        if longest > bubble:
            bubble = longest
    return compute + <double>(stages - 1) * bubble


cdef bint _next_composition(i64[::1] x, Py_ssize_t k, i64 total) noexcept nogil:
    # advance x (sum == total) to the next composition in lexicographic order
    cdef Py_ssize_t i, j
    cdef i64 suffix = 0, prefix = 0
    if k <= 1:
        return False
    i = k - 2
    suffix = x[k - 1]
    while i >= 0 and suffix == 0:
        suffix += x[i]
        i -= 1
    if i < 0:
        return False
    x[i] += 1
    for j in range(i + 1, k):
        x[j] = 0
    for j in range(i + 1):
        prefix += x[j]
    x[k - 1] = total - prefix
    return True


def minimax_enumerate(units, chunks, replicas, stages, ranges, demands):
    cdef Py_ssize_t n_groups = len(replicas)
    cdef Py_ssize_t n_buckets = len(demands)
    cdef double[:, ::1] U = np.zeros((n_groups, max(n_buckets, 1)), dtype=np.float64)
    cdef i64[:, ::1] C = np.ones((n_groups, max(n_buckets, 1)), dtype=np.int64)
    cdef i64[::1] P = np.ascontiguousarray(replicas, dtype=np.int64)
    cdef i64[::1] S = np.ascontiguousarray(stages, dtype=np.int64)
    cdef i64[::1] Rg = np.ascontiguousarray(ranges, dtype=np.int64)
    cdef i64[::1] B = np.ascontiguousarray(demands, dtype=np.int64)
    cdef Py_ssize_t g, j, t, idx
    for g in range(n_groups):
        for j in range(Rg[g]):
            U[g, j] = units[g][j]
            C[g, j] = chunks[g][j]

    # supporters of each bucket, flattened
    cdef i64[::1] nsup = np.zeros(max(n_buckets, 1), dtype=np.int64)
    cdef i64[:, ::1] sup = np.zeros((max(n_buckets, 1), max(n_groups, 1)), dtype=np.int64)
    for j in range(n_buckets):
        for g in range(n_groups):
            if Rg[g] > j:
                sup[j, nsup[j]] = g
                nsup[j] += 1
    cdef i64[:, ::1] comp = np.zeros((max(n_buckets, 1), max(n_groups, 1)), dtype=np.int64)
    for j in range(n_buckets):
        if B[j] > 0:
            comp[j, nsup[j] - 1] = B[j]

    cdef i64[:, ::1] d = np.zeros((n_groups, max(n_buckets, 1)), dtype=np.int64)
    cdef i64[:, ::1] best_d = np.zeros((n_groups, max(n_buckets, 1)), dtype=np.int64)
    cdef double best = INFINITY
    cdef double worst, tg
    cdef bint have = False, smaller, advanced
    with nogil:
        while True:
            for g in range(n_groups):
                for j in range(n_buckets):
                    d[g, j] = 0
            for j in range(n_buckets):
                if B[j] > 0:
                    for t in range(nsup[j]):
                        d[sup[j, t], j] = comp[j, t]
            worst = 0.0
            for g in range(n_groups):
                tg = _group_time(U, C, d, g, P[g], S[g], Rg[g])
                if tg > worst:
                    worst = tg
            smaller = False
            if not have or worst < best:
                smaller = True
            elif worst == best:
                for idx in range(n_groups * n_buckets):
                    g = idx // n_buckets
                    j = idx % n_buckets
                    if d[g, j] != best_d[g, j]:
                        smaller = d[g, j] < best_d[g, j]
                        break
            if smaller:
                best = worst
                have = True
                best_d[:, :] = d
            # odometer over buckets, last bucket fastest
            advanced = False
            j = n_buckets - 1
            while j >= 0:
                if B[j] > 0 and _next_composition(comp[j], nsup[j], B[j]):
                    advanced = True
                    break
                if B[j] > 0:
                    for t in range(nsup[j]):
                        comp[j, t] = 0
                    comp[j, nsup[j] - 1] = B[j]
                j -= 1
            if not advanced:
                break
    out = [[int(best_d[g, j]) for j in range(n_buckets)] for g in range(n_groups)]
    return float(best), out
