"""Pure-Python kernels. Same API and results as the compiled ``_kernels``."""

from __future__ import annotations


def ffd_feasible(hist, num_bins, capacity):
    """First-fit-decreasing feasibility for items given as a size histogram.

    ``hist[s]`` is the number of items of size ``s`` (sizes 1..capacity).
    Identical items under first fit fill the first bin with room until it
    can take no more, so each size class is placed bin by bin.
    """
    rem = [capacity] * num_bins
    for s in range(len(hist) - 1, 0, -1):
        c = hist[s]
        if not c:
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
                if not c:
                    break
        if c:
            return False
    return True


def validity_frontier(xbars, aligned, num_bins, capacity):
    """For every start index, the largest aligned end whose prefixes all pack.

    ``aligned`` has length M + 1; ``aligned[j]`` marks legal partition
    boundaries. Returns a list of M ints.
    """
    m = len(xbars)
    total_cap = num_bins * capacity
    out = [0] * m
    for i in range(m):
        hist = [0] * (capacity + 1)
        total = 0
        best = i
        for j in range(i, m):
            x = xbars[j]
            total += x
            if x > capacity or total > total_cap:
                break
            hist[x] += 1
            if aligned[j + 1]:
                if not ffd_feasible(hist, num_bins, capacity):
                    break
                best = j + 1
        out[i] = best
    return out


def stage_ns(inv, r, groups, mvm_latency, acc, vfu_work, num_bins):
    lanes = min(r, inv) * groups  # replicas beyond the invocation count idle
    if lanes > num_bins:
        lanes = num_bins
    return -(-inv // r) * mvm_latency + acc + vfu_work / lanes


def allocate_replication(invocations, acc, vfu_work, groups, layer_hists, base_hist, mvm_latency,
                         num_bins, capacity):
    """Greedy bottleneck replication.

    Repeatedly replicate the layer with the largest stage time while the
    extra instances still pack; stop when the bottleneck cannot be improved
    or its increment does not fit. Ties go to the lowest layer index.
    """
    n = len(invocations)
    reps = [1] * n
    hist = list(base_hist)
    total = sum(s * c for s, c in enumerate(hist))
    total_cap = num_bins * capacity
    layer_totals = [sum(s * c for s, c in enumerate(h)) for h in layer_hists]
    times = [stage_ns(invocations[l], 1, groups[l], mvm_latency, acc[l], vfu_work[l], num_bins) for l in range(n)]
    while n:
        best = 0
        for l in range(1, n):
            if times[l] > times[best]:
                best = l
        r = reps[best]
        t_next = stage_ns(invocations[best], r + 1, groups[best], mvm_latency, acc[best], vfu_work[best], num_bins)
        if not t_next < times[best]:
            break
        if total + layer_totals[best] > total_cap:
            break
        trial = [a + b for a, b in zip(hist, layer_hists[best])]
        if not ffd_feasible(trial, num_bins, capacity):
            break
        hist = trial
        total += layer_totals[best]
        reps[best] = r + 1
        times[best] = t_next
    return reps
