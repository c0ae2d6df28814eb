import math

import pytest
from hypothesis import given, settings, strategies as st

from compass import _kernels_py, kernels

from conftest import ffd_pack

BACKENDS = kernels.backends()


def _hist(sizes, cap):
    h = [0] * (cap + 1)
    for s in sizes:
        h[s] += 1
    return h


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


@pytest.mark.parametrize("impl", list(BACKENDS.values()), ids=list(BACKENDS))
def test_ffd_examples(impl):
    assert impl.ffd_feasible(_hist([8, 8, 2, 2], 16), 2, 16)
    assert impl.ffd_feasible(_hist([9, 9, 9], 9), 3, 9)
    assert not impl.ffd_feasible(_hist([9, 9, 9], 9), 2, 9)
    assert not impl.ffd_feasible(_hist([3, 3, 3], 4), 2, 4)
    assert impl.ffd_feasible(_hist([], 4), 1, 4)


@settings(max_examples=300, deadline=None)
@given(cap=st.integers(1, 12), bins=st.integers(1, 6), data=st.data())
def test_histogram_ffd_matches_itemwise(cap, bins, data):
    sizes = data.draw(st.lists(st.integers(1, cap), max_size=20))
    expect = ffd_pack(sizes, bins, cap)
    for impl in BACKENDS.values():
        assert impl.ffd_feasible(_hist(sizes, cap), bins, cap) == expect


@settings(max_examples=200, deadline=None)
@given(cap=st.integers(1, 10), bins=st.integers(1, 5), data=st.data())
def test_frontier_backends_agree(cap, bins, data):
    xs = data.draw(st.lists(st.integers(1, cap), min_size=1, max_size=30))
    aligned = [True] + [data.draw(st.booleans()) for _ in xs[1:]] + [True]
    results = {name: impl.validity_frontier(xs, aligned, bins, cap) for name, impl in BACKENDS.items()}
    first = next(iter(results.values()))
    assert all(r == first for r in results.values())
    # brute force: largest aligned j with every aligned prefix packing
    for i in range(len(xs)):
        best = i
        for j in range(i + 1, len(xs) + 1):
            if not aligned[j]:
                continue
            if sum(xs[i:j]) > bins * cap or not ffd_pack(xs[i:j], bins, cap):
                break
            best = j
        assert first[i] == best


def test_stage_ns_formula():
    for impl in BACKENDS.values():
        assert impl.stage_ns(1024, 1, 1, 100.0, 0.0, 0.0, 16) == 102_400
        assert impl.stage_ns(1024, 4, 1, 100.0, 0.0, 0.0, 16) == 25_600
        assert impl.stage_ns(10, 3, 1, 100.0, 0.0, 0.0, 16) == 400
        # vector work spreads over min(cores, min(r, inv) * groups) lanes
        assert impl.stage_ns(1, 1, 2, 0.0, 5.0, 120.0, 16) == 5.0 + 60.0
        assert impl.stage_ns(100, 8, 4, 0.0, 0.0, 160.0, 16) == 10.0
        assert impl.stage_ns(1, 8, 4, 0.0, 0.0, 160.0, 16) == 40.0


@settings(max_examples=200, deadline=None)
@given(inv=st.integers(1, 5000), r=st.integers(1, 64), groups=st.integers(1, 8),
       acc=st.floats(0, 1e4), vfu=st.floats(0, 1e5), cores=st.integers(1, 64))
def test_stage_ns_monotone_in_r(inv, r, groups, acc, vfu, cores):
    for impl in BACKENDS.values():
        assert impl.stage_ns(inv, r + 1, groups, 100.0, acc, vfu, cores) <= impl.stage_ns(
            inv, r, groups, 100.0, acc, vfu, cores)


def _alloc_case(impl, inv, per_layer_xbars, cores, cap, acc=None, vfu=None, groups=None):
    n = len(inv)
    hists = [_hist(x, cap) for x in per_layer_xbars]
    base = [sum(col) for col in zip(*hists)]
    return impl.allocate_replication(inv, acc or [0.0] * n, vfu or [0.0] * n, groups or [1] * n,
                                     hists, base, 100.0, cores, cap)


@pytest.mark.parametrize("impl", list(BACKENDS.values()), ids=list(BACKENDS))
def test_replication_hand_example(impl):
    # two equal one-core layers, layer 0 has 4x the invocations, room for 5 instances
    assert _alloc_case(impl, [1024, 256], [[4], [4]], 5, 4) == [4, 1]


@pytest.mark.parametrize("impl", list(BACKENDS.values()), ids=list(BACKENDS))
def test_replication_no_headroom(impl):
    assert _alloc_case(impl, [1024], [[4, 4]], 2, 4) == [1]


@pytest.mark.parametrize("impl", list(BACKENDS.values()), ids=list(BACKENDS))
def test_replication_stops_without_gain(impl):
    # a Linear layer (1 invocation) gains nothing from copies
    assert _alloc_case(impl, [1], [[1]], 8, 4) == [1]


@settings(max_examples=150, deadline=None)
@given(cap=st.integers(2, 9), cores=st.integers(1, 6), data=st.data())
def test_replication_backends_agree_and_pack(cap, cores, data):
    n = data.draw(st.integers(1, 4))
    inv = [data.draw(st.integers(1, 3000)) for _ in range(n)]
    xb = [data.draw(st.lists(st.integers(1, cap), min_size=1, max_size=3)) for _ in range(n)]
    acc = [data.draw(st.floats(0, 1e4)) for _ in range(n)]
    vfu = [data.draw(st.floats(0, 1e5)) for _ in range(n)]
    groups = [data.draw(st.integers(1, 3)) for _ in range(n)]
    if not ffd_pack([s for x in xb for s in x], cores, cap):
        return
    results = [_alloc_case(impl, inv, xb, cores, cap, acc, vfu, groups) for impl in BACKENDS.values()]
    assert all(r == results[0] for r in results)
    reps = results[0]
    sizes = [s for x, r in zip(xb, reps) for _ in range(r) for s in x]
    assert ffd_pack(sizes, cores, cap)
    # bottleneck never worse than with no replication
    t = lambda r: max(_kernels_py.stage_ns(i, k, g, 100.0, a, v, cores)
                      for i, k, g, a, v in zip(inv, r, groups, acc, vfu))
    assert t(reps) <= t([1] * n)
    assert all(math.isfinite(x) for x in (t(reps),))
