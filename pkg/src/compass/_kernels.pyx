# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Mirrors ``_kernels_py`` exactly."""

from libc.stdlib cimport malloc, free, calloc


cdef bint _ffd(long *hist, int maxsize, int num_bins, int capacity, long *rem) nogil:
    cdef int s, b
    cdef long c, k, r
    for b in range(num_bins):
        rem[b] = capacity
    for s in range(maxsize, 0, -1):
        c = hist[s]
        if c == 0:
            continue
        if s > capacity:
            return False
        for b in range(num_bins):
            r = rem[b]
            if r >= s:
                k = r // s
                if k > c:
                    k = c
                rem[b] = r - k * s
                c -= k
                if c == 0:
                    break
        if c != 0:
            return False
    return True


def ffd_feasible(hist, int num_bins, int capacity):
    cdef int n = len(hist)
    cdef long *h = <long *> malloc(n * sizeof(long))
    cdef long *rem = <long *> malloc(num_bins * sizeof(long))
    cdef int i
    cdef bint ok
    try:
        for i in range(n):
            h[i] = hist[i]
        ok = _ffd(h, n - 1, num_bins, capacity, rem)
    finally:
        free(h)
        free(rem)
    return bool(ok)


def validity_frontier(xbars, aligned, int num_bins, int capacity):
    cdef int m = len(xbars)
    cdef long total_cap = <long> num_bins * capacity
    cdef long *xs = <long *> malloc(m * sizeof(long))
    cdef char *al = <char *> malloc((m + 1) * sizeof(char))
    cdef long *hist = <long *> malloc((capacity + 1) * sizeof(long))
    cdef long *rem = <long *> malloc(num_bins * sizeof(long))
    cdef int i, j, s, best
    cdef long total, x
    out = [0] * m
    try:
        for i in range(m):
            xs[i] = xbars[i]
        for i in range(m + 1):
            al[i] = 1 if aligned[i] else 0
        for i in range(m):
            for s in range(capacity + 1):
                hist[s] = 0
            total = 0
            best = i
            for j in range(i, m):
                x = xs[j]
                total += x
                if x > capacity or total > total_cap:
                    break
                hist[x] += 1
                if al[j + 1]:
                    if not _ffd(hist, capacity, num_bins, capacity, rem):
                        break
                    best = j + 1
            out[i] = best
    finally:
        free(xs)
        free(al)
        free(hist)
        free(rem)
    return out


cdef inline double _stage_ns(long inv, long r, long groups, double mvm_latency, double acc,
                            double vfu_work, int num_bins) nogil:
    cdef long lanes = (r if r < inv else inv) * groups
    if lanes > num_bins:
        lanes = num_bins
    return ((inv + r - 1) // r) * mvm_latency + acc + vfu_work / lanes


def stage_ns(long inv, long r, long groups, double mvm_latency, double acc, double vfu_work, int num_bins):
    return _stage_ns(inv, r, groups, mvm_latency, acc, vfu_work, num_bins)


def allocate_replication(invocations, acc, vfu_work, groups, layer_hists, base_hist, double mvm_latency,
                         int num_bins, int capacity):
    cdef int n = len(invocations)
    cdef int hsize = len(base_hist)
    cdef long *inv = <long *> malloc(n * sizeof(long))
    cdef long *grp = <long *> malloc(n * sizeof(long))
    cdef double *ac = <double *> malloc(n * sizeof(double))
    cdef double *vw = <double *> malloc(n * sizeof(double))
    cdef double *times = <double *> malloc(n * sizeof(double))
    cdef long *reps = <long *> malloc(n * sizeof(long))
    cdef long *ltot = <long *> calloc(n, sizeof(long))
    cdef long *lh = <long *> malloc(n * hsize * sizeof(long))
    cdef long *hist = <long *> malloc(hsize * sizeof(long))
    cdef long *trial = <long *> malloc(hsize * sizeof(long))
    cdef long *rem = <long *> malloc(num_bins * sizeof(long))
    cdef int l, s, best
    cdef long total = 0, total_cap = <long> num_bins * capacity, r
    cdef double t_next
    try:
        for l in range(n):
            inv[l] = invocations[l]
            grp[l] = groups[l]
            ac[l] = acc[l]
            vw[l] = vfu_work[l]
            reps[l] = 1
            row = layer_hists[l]
            for s in range(hsize):
                lh[l * hsize + s] = row[s]
                ltot[l] += s * lh[l * hsize + s]
            times[l] = _stage_ns(inv[l], 1, grp[l], mvm_latency, ac[l], vw[l], num_bins)
        for s in range(hsize):
            hist[s] = base_hist[s]
            total += s * hist[s]
        while n > 0:
            best = 0
            for l in range(1, n):
                if times[l] > times[best]:
                    best = l
            r = reps[best]
            t_next = _stage_ns(inv[best], r + 1, grp[best], mvm_latency, ac[best], vw[best], num_bins)
            if not t_next < times[best]:
                break
            if total + ltot[best] > total_cap:
                break
            for s in range(hsize):
                trial[s] = hist[s] + lh[best * hsize + s]
            if not _ffd(trial, hsize - 1, num_bins, capacity, rem):
                break
            for s in range(hsize):
                hist[s] = trial[s]
            total += ltot[best]
            reps[best] = r + 1
            times[best] = t_next
        return [reps[l] for l in range(n)]
    finally:
        free(inv)
        free(grp)
        free(ac)
        free(vw)
        free(times)
        free(reps)
        free(ltot)
        free(lh)
        free(hist)
        free(trial)
        free(rem)
