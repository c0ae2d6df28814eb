import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compass import cost_model, network_ir, partitioner
from compass.network_ir import GraphBuilder
from compass.partitioner import (
    INPUT_TENSOR,
    PartitionFactory,
    finalize,
    generate_random_group,
    greedy_boundaries,
    greedy_group,
    group_violations,
    layerwise_group,
    map_cores,
    random_boundaries,
)

from conftest import bench, make_setup, random_setup, small_chip

PAIRS = [(n, c) for n in network_ir.BENCHMARKS for c in "SML"]


def _raw_group(setup, cuts):
    parts = tuple(partitioner.Partition(index=k, span=(a, b)) for k, (a, b) in enumerate(zip(cuts, cuts[1:])))
    return partitioner.PartitionGroup(parts, setup.model, setup.chip)


def _four_core_units():
    g = GraphBuilder("four", (64, 2, 2))
    x = None
    for _ in range(4):
        x = g.conv(x, 64, 64, 4, padding=2 if x is not None else 1)
    return make_setup(g.build(), small_chip(cores=2, xpc=4))


def test_four_units_two_cores():
    s = _four_core_units()
    assert [u.crossbars_needed for u in s.model.units] == [4, 4, 4, 4]
    assert greedy_boundaries(s.vmap) == [0, 2, 4]
    valid = {(i, j) for i in range(4) for j in range(i + 1, 5) if s.vmap.is_valid(i, j)}
    assert valid == {(i, j) for i in range(4) for j in range(i + 1, 5) if j - i <= 2}


def test_greedy_single_partition_when_model_fits():
    s = bench("squeezenet", "L")
    group = greedy_group(s.model, s.chip, s.vmap, s.factory)
    assert len(group) == 1
    p = group.partitions[0]
    assert [t for t, _ in p.entries] == [INPUT_TENSOR]
    assert [t for t, _ in p.exits] == s.graph.sinks


def test_greedy_first_partition_largest():
    s = bench("resnet18", "M")
    g = greedy_group(s.model, s.chip, s.vmap, s.factory)
    lw = layerwise_group(s.model, s.chip, s.vmap, s.factory)
    first = g.partitions[0].size
    assert first >= lw.partitions[0].size
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert first >= random_boundaries(s.vmap, rng)[1]


def test_layerwise_counts():
    s = bench("resnet18", "M")
    lw = layerwise_group(s.model, s.chip, s.vmap, s.factory)
    assert len(lw) == len(s.graph.mappable_nodes()) == 21
    for p in lw.partitions:
        assert len(p.layers) == 1


def test_layerwise_fc1_fallback():
    s = bench("vgg16", "S")
    lw = layerwise_group(s.model, s.chip, s.vmap, s.factory)
    fc1 = next(n.id for n in s.graph.nodes if n.name == "fc1")
    parts = [p for p in lw.partitions if p.layers == [fc1]]
    assert len(parts) > 1
    a, b = s.model.layer_ranges[fc1]
    assert parts[0].span[0] == a and parts[-1].span[1] == b
    assert all(s.vmap.is_valid(*p.span) for p in parts)


def test_layerwise_toy_attaches_relu():
    g = GraphBuilder("toy", (3, 8, 8))
    r = g.relu(g.conv(None, 3, 8, 3, padding=1))
    g.conv(r, 8, 8, 3, padding=1)
    s = make_setup(g.build(), bench("vgg16", "S").chip)
    lw = layerwise_group(s.model, s.chip, s.vmap, s.factory)
    assert len(lw) == 2
    assert lw.partitions[0].attached_aux == (r,)
    assert lw.partitions[1].attached_aux == ()


def _residual():
    g = GraphBuilder("res", (8, 6, 6))
    a = g.conv(None, 8, 16, 3, padding=1)
    r = g.relu(a)
    b = g.bn(g.conv(r, 16, 16, 3, padding=1))
    c = g.conv(b, 16, 16, 3, padding=1)
    add = g.add(c, r)
    return make_setup(g.build(), bench("vgg16", "M").chip), dict(a=a, r=r, b=b, c=c, add=add)


def test_attach_and_residual_exits():
    s, ids = _residual()
    assert s.model.M == 3
    group = finalize(_raw_group(s, [0, 2, 3]))
    p0, p1 = group.partitions
    assert ids["b"] in p0.attached_aux and ids["r"] in p0.attached_aux
    assert ids["add"] in p1.attached_aux
    assert [t for t, _ in p0.exits] == [ids["r"], ids["b"]]  # skip + main path
    assert [t for t, _ in p1.entries] == [ids["r"], ids["b"]]
    assert group_violations(group, s.vmap) == []
    # add joining P0 and P1 producers goes with the latest one
    group = finalize(_raw_group(s, [0, 1, 2, 3]))
    assert ids["add"] in group.partitions[2].attached_aux


def test_first_activation_without_ancestor():
    g = GraphBuilder("pre", (3, 8, 8))
    r = g.relu(None)
    g.conv(r, 3, 8, 1)
    s = make_setup(g.build(), bench("vgg16", "S").chip)
    group = greedy_group(s.model, s.chip, s.vmap, s.factory)
    assert group.partitions[0].attached_aux[0] == r
    assert group_violations(group, s.vmap) == []


def test_chain_cut_io():
    g = GraphBuilder("chain", (3, 8, 8))
    a = g.conv(None, 3, 8, 3, padding=1)
    b = g.conv(a, 8, 8, 3, padding=1)
    s = make_setup(g.build(), bench("vgg16", "S").chip)
    group = s.factory.group([0, 1, 2])
    p0, p1 = group.partitions
    nbytes = 8 * 8 * 8 * 4 // 8
    assert p0.entries == ((INPUT_TENSOR, 3 * 64 * 4 // 8),)
    assert p0.exits == ((a, nbytes),)
    assert p1.entries == ((a, nbytes),)
    assert p1.exits == ((b, nbytes),)


def test_factory_matches_finalize():
    s = bench("resnet18", "S")
    cuts = random_boundaries(s.vmap, np.random.default_rng(3))
    via_factory = s.factory.group(cuts)
    via_steps = finalize(_raw_group(s, cuts))
    for x, y in zip(via_factory.partitions, via_steps.partitions):
        assert (x.span, x.replication, x.attached_aux, x.entries, x.exits, x.core_map) == (
            y.span, y.replication, y.attached_aux, y.entries, y.exits, y.core_map)


def test_random_group_deterministic():
    s = bench("resnet18", "S")
    a = generate_random_group(s.model, s.chip, s.vmap, 42)
    b = generate_random_group(s.model, s.chip, s.vmap, 42, PartitionFactory(s.model, s.chip))
    assert a.boundaries == b.boundaries
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("net,chip", PAIRS)
def test_generators_satisfy_invariants(net, chip):
    s = bench(net, chip)
    groups = [greedy_group(s.model, s.chip, s.vmap, s.factory),
              layerwise_group(s.model, s.chip, s.vmap, s.factory)]
    groups += [generate_random_group(s.model, s.chip, s.vmap, seed, s.factory) for seed in range(10)]
    for g in groups:
        assert group_violations(g, s.vmap) == []


def test_random_groups_resnet_s():
    s = bench("resnet18", "S")
    for seed in range(200):
        assert group_violations(generate_random_group(s.model, s.chip, s.vmap, seed, s.factory), s.vmap) == []


@pytest.mark.parametrize("seed", range(10))
def test_random_toy_groups(seed):
    rng = np.random.default_rng(100 + seed)
    s = random_setup(rng)
    for _ in range(10):
        g = s.factory.group(random_boundaries(s.vmap, rng))
        assert group_violations(g, s.vmap) == []


def test_violation_checker_catches_breakage():
    s = bench("resnet18", "M")
    g = greedy_group(s.model, s.chip, s.vmap, s.factory)
    p = g.partitions[0]
    bad = dataclasses.replace(p, exits=p.exits[1:])
    broken = dataclasses.replace(g, partitions=(bad,) + g.partitions[1:])
    assert group_violations(broken, s.vmap)
    bad = dataclasses.replace(p, replication={})
    broken = dataclasses.replace(g, partitions=(bad,) + g.partitions[1:])
    assert group_violations(broken, s.vmap)
    uid, rep = next(iter(p.core_map))
    other = next(k for k in p.core_map if k != (uid, rep))
    cm = dict(p.core_map)
    cm[other] = cm[(uid, rep)]
    broken = dataclasses.replace(g, partitions=(dataclasses.replace(p, core_map=cm),) + g.partitions[1:])
    assert any("overlap" in v for v in group_violations(broken, s.vmap))


def test_map_cores_three_full_units():
    chip = bench("vgg16", "S").chip
    g = GraphBuilder("lin", (2304,))
    g.linear(None, 2304, 192)
    s = make_setup(g.build(), chip)
    p = s.factory.partition(0, s.model.M)
    assert [u.crossbars_needed for u in s.model.units] == [9, 9, 9]
    assert p.replication == {0: 1}
    assert sorted(core for core, _ in p.core_map.values()) == [0, 1, 2]


def test_map_cores_ffd_example():
    g = GraphBuilder("ffd", (32, 9, 11))
    a = g.conv(None, 32, 64, 8)  # 2048 rows, 64 channels -> 8 crossbars
    b = g.linear(g.flatten(a), 512, 64)  # 512 rows -> 2 crossbars
    s = make_setup(g.build(), bench("vgg16", "M").chip)
    assert [u.crossbars_needed for u in s.model.units] == [8, 2]
    p = s.factory.partition(0, 2)
    p = map_cores(dataclasses.replace(p, replication={a: 2, b: 2}), s.chip)
    by_core = {}
    for (uid, _), (core, _) in p.core_map.items():
        by_core.setdefault(core, []).append(s.model.units[uid].crossbars_needed)
    assert by_core == {0: [8, 8], 1: [2, 2]}


def test_replication_one_layer_filling_chip():
    g = GraphBuilder("full", (2304, 4, 4))
    g.conv(None, 2304, 16 * 64, 1)  # 16 units of 9 crossbars on chip S
    s = make_setup(g.build(), bench("vgg16", "S").chip)
    p = s.factory.partition(0, s.model.M)
    assert sum(u.crossbars_needed for u in p.units) == s.chip.total_crossbars
    assert p.replication == {0: 1}


@pytest.mark.parametrize("net,chip", PAIRS)
def test_replication_never_hurts(net, chip):
    s = bench(net, chip)
    for p in greedy_group(s.model, s.chip, s.vmap, s.factory).partitions:
        base = dataclasses.replace(p, replication={l: 1 for l in p.layers})
        t1 = max(st.T for st in cost_model.stage_times(base, s.chip))
        tr = max(st.T for st in cost_model.stage_times(p, s.chip))
        assert tr <= t1


def test_replication_independent_of_enumeration_order():
    s = bench("resnet18", "L")
    p = greedy_group(s.model, s.chip, s.vmap, s.factory).partitions[0]
    assert len(p.layers) > 1
    stale = dataclasses.replace(p, replication=dict(reversed(list(p.replication.items()))))
    assert partitioner.allocate_replication(stale, s.chip).replication == p.replication
    fresh = PartitionFactory(s.model, s.chip).partition(*p.span)
    assert fresh.replication == p.replication and fresh.core_map == p.core_map


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_boundaries_property(seed):
    s = bench("vgg16", "M")
    rng = np.random.default_rng(seed)
    lo = int(rng.choice(s.vmap.boundaries[:-1]))
    cuts = random_boundaries(s.vmap, rng, lo)
    assert cuts[0] == lo and cuts[-1] == s.model.M
    assert all(s.vmap.is_valid(a, b) for a, b in zip(cuts, cuts[1:]))


def test_group_to_dict_shape():
    s = bench("squeezenet", "M")
    doc = layerwise_group(s.model, s.chip, s.vmap, s.factory).to_dict()
    assert len(doc["partitions"]) == 26
    first = doc["partitions"][0]
    assert set(first) == {"index", "span", "layers", "replication", "attached_aux", "entries", "exits", "core_map"}
