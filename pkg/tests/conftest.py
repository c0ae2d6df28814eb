import dataclasses
import functools
import itertools

import numpy as np
import pytest

from compass import hw_model, network_ir, partitioner
from compass.decomposer import build_validity_map, decompose
from compass.errors import UnmappableLayer


@dataclasses.dataclass
class Setup:
    graph: object
    chip: object
    model: object
    vmap: object
    factory: object


@functools.lru_cache(maxsize=None)
def bench(net: str, chip: str) -> Setup:
    return make_setup(network_ir.build_benchmark(net), hw_model.builtin_chip(chip))


def make_setup(graph, chip) -> Setup:
    model = decompose(graph, chip)
    return Setup(graph, chip, model, build_validity_map(model, chip), partitioner.PartitionFactory(model, chip))


def small_chip(cores=2, xpc=4, **kw):
    base = hw_model.builtin_chip("S")
    core = dataclasses.replace(base.core, crossbars_per_core=xpc)
    return hw_model.replace(base, name=f"t{cores}x{xpc}", num_cores=cores, core=core, **kw)


def random_chain(rng, n_layers, max_cout=300, name="toy"):
    """Conv chain (then Linear head) with occasional aux nodes and residual adds."""
    g = network_ir.GraphBuilder(name, (int(rng.integers(1, 8)), 4, 4))
    cin = g.input_shape[0]
    x = None
    n_conv = max(1, int(rng.integers(1, n_layers + 1)))
    prev = None
    palette = [c for c in (8, 40, 64, 100, 160, 250, 300) if c <= max_cout] or [max_cout]
    for i in range(n_conv):
        cout = int(rng.choice(palette))
        k = int(rng.choice([1, 3]))
        y = g.conv(x, cin, cout, k, padding=k // 2, name=f"conv{i}")
        if rng.random() < 0.5:
            y = g.relu(y)
        if prev is not None and prev[1] == cout and rng.random() < 0.7:
            y = g.add(y, prev[0])
        prev = (y, cout)
        x, cin = y, cout
    if n_conv < n_layers:
        x = g.flatten(g.global_pool(x))
        for i in range(n_conv, n_layers):
            cout = int(rng.integers(1, max_cout))
            x = g.linear(x, cin, cout, name=f"fc{i}")
            cin = cout
    return g.build()


def random_setup(rng, max_layers=8, max_m=40):
    """Random small chain on a random small chip; redraws until it maps."""
    while True:
        chip = small_chip(cores=int(rng.integers(1, 5)), xpc=int(rng.integers(2, 10)))
        try:
            s = make_setup(random_chain(rng, int(rng.integers(2, max_layers))), chip)
        except UnmappableLayer:
            continue
        if s.model.M <= max_m:
            return s


def ffd_pack(sizes, bins, capacity):
    """Plain item-by-item first fit decreasing."""
    rem = [capacity] * bins
    for s in sorted(sizes, reverse=True):
        for b in range(bins):
            if rem[b] >= s:
                rem[b] -= s
                break
        else:
            return False
    return True


def brute_valid(model, chip, i, j, prefix_closed=True):
    """Explicitly pack span [i, j) (and, by default, every aligned prefix of it)."""
    flags = model.aligned()
    if not (0 <= i < j <= model.M and flags[i] and flags[j]):
        return False
    ends = [k for k in range(i + 1, j + 1) if flags[k]] if prefix_closed else [j]
    cap = chip.num_cores * chip.core.crossbars_per_core
    for k in ends:
        sizes = [u.crossbars_needed for u in model.units[i:k]]
        if sum(sizes) > cap or not ffd_pack(sizes, chip.num_cores, chip.core.crossbars_per_core):
            return False
    return True


def all_partitionings(vmap):
    """Every aligned cut list whose spans are all valid."""
    bounds = vmap.boundaries
    inner = bounds[1:-1]
    for mask in itertools.product((False, True), repeat=len(inner)):
        cuts = [0] + [b for b, m in zip(inner, mask) if m] + [vmap.M]
        if all(vmap.is_valid(a, b) for a, b in zip(cuts, cuts[1:])):
            yield cuts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
