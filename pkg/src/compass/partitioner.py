"""Partition groups: generation (random, greedy, layerwise) and finalization.

Finalizing a partition attaches non-crossbar layers, marks DRAM entry/exit
tensors, allocates weight replication and maps unit instances to cores.
Every one of those steps depends only on the partition's own unit span, so
finalized partitions are cached per span by :class:`PartitionFactory`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import cost_model, kernels
from .decomposer import DecomposedModel, ValidityMap
from .errors import PackingFailure
from .hw_model import ChipSpec
from .network_ir import NetworkGraph, tensor_bytes

INPUT_TENSOR = -1
DEFAULT_ACT_BITS = 4


@dataclass(frozen=True, eq=False)
class ModelIndex:
    """Span-independent lookups derived once per (model, activation bits)."""

    model: DecomposedModel
    act_bits: int = DEFAULT_ACT_BITS

    def __post_init__(self):
        graph = self.model.graph
        anchor = {}
        for node in graph.nodes:
            if node.mappable:
                anchor[node.id] = self.model.layer_ranges[node.id][1] - 1
            else:
                anchor[node.id] = max((anchor[s] for s in node.inputs), default=0)
        full = {n.id: tensor_bytes(graph.shapes[n.id], self.act_bits) for n in graph.nodes}
        full[INPUT_TENSOR] = tensor_bytes(graph.input_shape, self.act_bits)
        per_channel = {}
        for node in graph.mappable_nodes():
            shape = graph.shapes[node.id]
            per_channel[node.id] = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        aux_by_anchor: dict = {}
        for node in graph.nodes:
            if not node.mappable:
                aux_by_anchor.setdefault(anchor[node.id], []).append(node.id)
        set_ = object.__setattr__
        set_(self, "anchor", anchor)
        set_(self, "full_bytes", full)
        set_(self, "elems_per_channel", per_channel)
        set_(self, "aux_by_anchor", aux_by_anchor)

    @property
    def graph(self) -> NetworkGraph:
        return self.model.graph

    def channel_bytes(self, node_id: int, c0: int, c1: int) -> int:
        """Bytes of output channels [c0, c1); additive across adjacent ranges."""
        hw = self.elems_per_channel[node_id]
        return -(-c1 * hw * self.act_bits // 8) - (-(-c0 * hw * self.act_bits // 8))

    def channels_in_span(self, node_id: int, a: int, b: int):
        s, e = self.model.layer_ranges[node_id]
        lo, hi = max(a, s), min(b, e)
        if lo >= hi:
            return None
        units = self.model.units
        return units[lo].out_slice[0], units[hi - 1].out_slice[1]

    def bytes_in_span(self, node_id: int, a: int, b: int) -> int:
        node = self.graph.node(node_id)
        if node.mappable:
            ch = self.channels_in_span(node_id, a, b)
            return 0 if ch is None else self.channel_bytes(node_id, *ch)
        return self.full_bytes[node_id] if a <= self.anchor[node_id] < b else 0

    def fully_in_span(self, node_id: int, a: int, b: int) -> bool:
        node = self.graph.node(node_id)
        if node.mappable:
            s, e = self.model.layer_ranges[node_id]
            return a <= s and e <= b
        return a <= self.anchor[node_id] < b

    def nodes_in_span(self, a: int, b: int) -> list:
        out = []
        for node in self.graph.nodes:
            if node.mappable:
                if self.channels_in_span(node.id, a, b) is not None:
                    out.append(node.id)
            elif a <= self.anchor[node.id] < b:
                out.append(node.id)
        return out

    def layers_in_span(self, a: int, b: int) -> list:
        units = self.model.units
        seen = []
        for uid in range(a, b):
            lid = units[uid].layer_id
            if not seen or seen[-1] != lid:
                seen.append(lid)
        return seen

    def aux_in_span(self, a: int, b: int) -> list:
        out = []
        for uid in range(a, b):
            out.extend(self.aux_by_anchor.get(uid, ()))
        return sorted(out, key=self.graph.position)

    def io_for_span(self, a: int, b: int):
        graph = self.graph
        inside = self.nodes_in_span(a, b)
        entries: dict = {}
        exits: dict = {}
        for v in inside:
            node = graph.node(v)
            if not node.inputs:
                entries[INPUT_TENSOR] = self.full_bytes[INPUT_TENSOR]
            for u in dict.fromkeys(node.inputs):
                outside = self.full_bytes[u] - self.bytes_in_span(u, a, b)
                if outside > 0:
                    entries[u] = outside
        for u in inside:
            here = self.bytes_in_span(u, a, b)
            if here <= 0:
                continue
            consumers = graph.consumers(u)
            if not consumers or any(not self.fully_in_span(v, a, b) for v in consumers):
                exits[u] = here
        order = lambda t: -1 if t == INPUT_TENSOR else graph.position(t)
        return (
            tuple((t, entries[t]) for t in sorted(entries, key=order)),
            tuple((t, exits[t]) for t in sorted(exits, key=order)),
        )


@dataclass(frozen=True, eq=False)
class Partition:
    index: int
    span: tuple  # [pos0, pos1) uid range
    replication: dict = field(default_factory=dict)  # layer_id -> r
    attached_aux: tuple = ()
    entries: tuple = ()  # (tensor_id, bytes_per_sample)
    exits: tuple = ()
    core_map: dict = field(default_factory=dict)  # (uid, replica) -> (core, xbar offset)
    index_ref: ModelIndex | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.span[1] - self.span[0]

    @property
    def model(self) -> DecomposedModel:
        return self.index_ref.model

    @property
    def units(self):
        return self.index_ref.model.units[self.span[0]:self.span[1]]

    @property
    def layers(self) -> list:
        return self.index_ref.layers_in_span(*self.span)

    def instances(self):
        """(unit, replica) pairs in enumeration order."""
        for u in self.units:
            for k in range(self.replication.get(u.layer_id, 1)):
                yield u, k

    def key(self):
        return (self.span, tuple(sorted(self.replication.items())))

    def with_index(self, index: int) -> "Partition":
        return self if index == self.index else dataclasses.replace(self, index=index)


@dataclass(frozen=True, eq=False)
class PartitionGroup:
    partitions: tuple
    model: DecomposedModel = field(repr=False)
    chip: ChipSpec = field(repr=False)

    @property
    def spans(self) -> tuple:
        return tuple(p.span for p in self.partitions)

    @property
    def boundaries(self) -> tuple:
        return tuple(p.span[0] for p in self.partitions) + (self.model.M,)

    def __len__(self):
        return len(self.partitions)

    def to_dict(self) -> dict:
        graph = self.model.graph
        return {
            "partitions": [
                {
                    "index": p.index,
                    "span": list(p.span),
                    "layers": [graph.node(l).name or str(l) for l in p.layers],
                    "replication": {str(k): v for k, v in sorted(p.replication.items())},
                    "attached_aux": list(p.attached_aux),
                    "entries": [[t, b] for t, b in p.entries],
                    "exits": [[t, b] for t, b in p.exits],
                    "core_map": [
                        [uid, rep, core, off] for (uid, rep), (core, off) in sorted(p.core_map.items())
                    ],
                }
                for p in self.partitions
            ]
        }


# -- finalization steps -------------------------------------------------------


def attach_aux_layers(group: PartitionGroup, graph: NetworkGraph, act_bits: int = DEFAULT_ACT_BITS) -> PartitionGroup:
    """Place every non-crossbar node in the partition of its latest
    crossbar-mapped ancestor (P0 when it has none)."""
    index = _index(group, act_bits)
    parts = tuple(
        dataclasses.replace(p, attached_aux=tuple(index.aux_in_span(*p.span)), index_ref=index)
        for p in group.partitions
    )
    return dataclasses.replace(group, partitions=parts)


def mark_io(group: PartitionGroup, graph: NetworkGraph, act_bits: int = DEFAULT_ACT_BITS) -> PartitionGroup:
    index = _index(group, act_bits)
    parts = []
    for p in group.partitions:
        entries, exits = index.io_for_span(*p.span)
        parts.append(dataclasses.replace(p, entries=entries, exits=exits, index_ref=index))
    return dataclasses.replace(group, partitions=tuple(parts))


def allocate_replication(partition: Partition, chip: ChipSpec) -> Partition:
    """Replicate the slowest pipeline stage while the extra copies still pack."""
    xpc = chip.core.crossbars_per_core
    units = partition.units
    layers = sorted(partition.layers)
    pos = {l: i for i, l in enumerate(layers)}
    layer_hists = [[0] * (xpc + 1) for _ in layers]
    for u in units:
        layer_hists[pos[u.layer_id]][u.crossbars_needed] += 1
    base = [sum(col) for col in zip(*layer_hists)]
    base_partition = dataclasses.replace(partition, replication={l: 1 for l in layers})
    stages = [cost_model.stage_time(l, base_partition, chip) for l in layers]
    reps = kernels.allocate_replication(
        [s.invocations for s in stages],
        [s.acc_overhead for s in stages],
        [s.vfu_work for s in stages],
        [s.groups for s in stages],
        layer_hists,
        base,
        chip.xbar.mvm_latency,
        chip.num_cores,
        xpc,
    )
    return dataclasses.replace(partition, replication=dict(zip(layers, reps)))


def map_cores(partition: Partition, chip: ChipSpec) -> Partition:
    """First-fit-decreasing placement of every unit instance onto cores.

    Equal-size instances are ordered by accumulation group so that siblings
    land on as few cores as possible.
    """
    xpc = chip.core.crossbars_per_core
    items = sorted(
        partition.instances(), key=lambda it: (-it[0].crossbars_needed, it[0].group_id, it[0].uid, it[1])
    )
    rem = [xpc] * chip.num_cores
    core_map = {}
    for unit, rep in items:
        size = unit.crossbars_needed
        for core in range(chip.num_cores):
            if rem[core] >= size:
                core_map[(unit.uid, rep)] = (core, xpc - rem[core])
                rem[core] -= size
                break
        else:
            raise PackingFailure(
                f"partition {partition.index} span {partition.span}: unit {unit.uid} replica {rep} "
                f"({size} crossbars) does not fit"
            )
    return dataclasses.replace(partition, core_map=core_map)


def _index(group: PartitionGroup, act_bits: int) -> ModelIndex:
    for p in group.partitions:
        if p.index_ref is not None and p.index_ref.act_bits == act_bits:
            return p.index_ref
    return ModelIndex(group.model, act_bits)


class PartitionFactory:
    """Builds finalized partitions, memoized by span."""

    def __init__(self, model: DecomposedModel, chip: ChipSpec, act_bits: int = DEFAULT_ACT_BITS):
        self.model = model
        self.chip = chip
        self.index = ModelIndex(model, act_bits)
        self._cache: dict = {}

    @property
    def act_bits(self) -> int:
        return self.index.act_bits

    def partition(self, a: int, b: int, index: int = 0) -> Partition:
        p = self._cache.get((a, b))
        if p is None:
            entries, exits = self.index.io_for_span(a, b)
            p = Partition(
                index=0,
                span=(a, b),
                attached_aux=tuple(self.index.aux_in_span(a, b)),
                entries=entries,
                exits=exits,
                index_ref=self.index,
            )
            p = map_cores(allocate_replication(p, self.chip), self.chip)
            self._cache[(a, b)] = p
        return p.with_index(index)

    def group(self, boundaries) -> PartitionGroup:
        bounds = list(boundaries)
        parts = tuple(self.partition(a, b, k) for k, (a, b) in enumerate(zip(bounds, bounds[1:])))
        return PartitionGroup(parts, self.model, self.chip)

    def cache_size(self) -> int:
        return len(self._cache)


def finalize(group: PartitionGroup, act_bits: int = DEFAULT_ACT_BITS) -> PartitionGroup:
    """Run the four finalization steps on a group whose spans are fixed."""
    graph = group.model.graph
    group = mark_io(attach_aux_layers(group, graph, act_bits), graph, act_bits)
    parts = tuple(map_cores(allocate_replication(p, group.chip), group.chip) for p in group.partitions)
    return dataclasses.replace(group, partitions=parts)


# -- generators -------------------------------------------------------------------


def random_boundaries(vmap: ValidityMap, rng: np.random.Generator, lo: int = 0, hi: int | None = None) -> list:
    """Random aligned cut points covering [lo, hi); every span valid."""
    hi = vmap.M if hi is None else hi
    cuts = [lo]
    start = lo
    while start < hi:
        ends = [j for j in vmap.valid_ends(start) if j <= hi]
        start = ends[int(rng.integers(len(ends)))]
        cuts.append(start)
    return cuts


def _factory(model, chip, factory):
    return factory if factory is not None else PartitionFactory(model, chip)


def generate_random_group(model, chip, vmap, rng_seed, factory: PartitionFactory | None = None) -> PartitionGroup:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return _factory(model, chip, factory).group(random_boundaries(vmap, rng))


def greedy_boundaries(vmap: ValidityMap) -> list:
    cuts = [0]
    while cuts[-1] < vmap.M:
        cuts.append(vmap.max_end[cuts[-1]])
    return cuts


def greedy_group(model, chip, vmap, factory: PartitionFactory | None = None) -> PartitionGroup:
    return _factory(model, chip, factory).group(greedy_boundaries(vmap))


def layerwise_boundaries(model: DecomposedModel, vmap: ValidityMap) -> list:
    """One partition per layer; layers larger than the chip are cut greedily
    at aligned positions inside the layer."""
    cuts = [0]
    for lid in model.layer_order:
        s, e = model.layer_ranges[lid]
        cur = s
        while cur < e:
            cur = min(vmap.max_end[cur], e)
            cuts.append(cur)
    return cuts


def layerwise_group(model, chip, vmap, factory: PartitionFactory | None = None) -> PartitionGroup:
    return _factory(model, chip, factory).group(layerwise_boundaries(model, vmap))


# -- invariant checking ----------------------------------------------------------


def group_violations(group: PartitionGroup, vmap: ValidityMap) -> list:
    """Every broken PartitionGroup invariant as a readable string (empty if sound)."""
    out = []
    model, chip = group.model, group.chip
    xpc = chip.core.crossbars_per_core
    graph = model.graph
    expect = 0
    for k, p in enumerate(group.partitions):
        a, b = p.span
        if p.index != k:
            out.append(f"P{k}: index {p.index}")
        if a != expect or b <= a:
            out.append(f"P{k}: span {p.span} does not continue cover at {expect}")
        expect = b
        if not vmap.is_valid(a, b):
            out.append(f"P{k}: span {p.span} invalid in validity map")
        # condition 1
        for u in p.units:
            if u.crossbars_needed > xpc:
                out.append(f"P{k}: unit {u.uid} exceeds one core")
        # condition 2: replication is per layer, all layers present
        if set(p.replication) != set(p.layers) or any(r < 1 for r in p.replication.values()):
            out.append(f"P{k}: replication map {p.replication} does not match layers {p.layers}")
        # condition 3: instances fit and core map is a legal packing
        instances = list(p.instances())
        total = sum(u.crossbars_needed for u, _ in instances)
        if total > chip.total_crossbars:
            out.append(f"P{k}: replicated footprint {total} > {chip.total_crossbars} crossbars")
        if set(p.core_map) != {(u.uid, r) for u, r in instances}:
            out.append(f"P{k}: core map does not cover every instance")
        else:
            used = [[] for _ in range(chip.num_cores)]
            for u, r in instances:
                core, off = p.core_map[(u.uid, r)]
                used[core].append((off, off + u.crossbars_needed))
            for core, ivs in enumerate(used):
                ivs.sort()
                if ivs and ivs[-1][1] > xpc:
                    out.append(f"P{k}: core {core} overflows")
                if any(x[1] > y[0] for x, y in zip(ivs, ivs[1:])):
                    out.append(f"P{k}: core {core} has overlapping crossbars")
    if expect != model.M:
        out.append(f"cover ends at {expect}, M={model.M}")
    if out:
        return out

    # aux attachment: each non-crossbar node in exactly one partition
    seen = {}
    for p in group.partitions:
        for n in p.attached_aux:
            seen[n] = seen.get(n, 0) + 1
    for node in graph.nodes:
        if not node.mappable and seen.get(node.id) != 1:
            out.append(f"aux node {node.id} attached {seen.get(node.id, 0)} times")

    # io completeness: every edge crossing partitions has exit + entry markers
    index = group.partitions[0].index_ref or ModelIndex(model)
    owners = _owners(group, index)
    for p in group.partitions:
        entries, exits = dict(p.entries), dict(p.exits)
        for node in graph.nodes:
            if p.index not in owners[node.id]:
                continue
            for u in node.inputs:
                if owners[u] != {p.index} and u not in entries:
                    out.append(f"P{p.index}: input {u} of node {node.id} produced elsewhere but not loaded")
            if not node.inputs and INPUT_TENSOR not in entries:
                out.append(f"P{p.index}: source node {node.id} has no external input entry")
        for node in graph.nodes:
            if p.index not in owners[node.id]:
                continue
            crosses = not graph.consumers(node.id) or any(
                owners[v] != {p.index} for v in graph.consumers(node.id)
            )
            if crosses and node.id not in exits:
                out.append(f"P{p.index}: node {node.id} feeds another partition but is not stored")
    # stored bytes cover what any later partition loads
    for q in group.partitions:
        for u, loaded in q.entries:
            produced = sum(dict(p.exits).get(u, 0) for p in group.partitions if p.index < q.index)
            if u != INPUT_TENSOR and produced < loaded:
                out.append(f"P{q.index}: loads {loaded} B of {u} but earlier partitions store {produced} B")
    return out


def _owners(group: PartitionGroup, index: ModelIndex) -> dict:
    owners = {n.id: set() for n in index.graph.nodes}
    for p in group.partitions:
        for n in index.nodes_in_span(*p.span):
            owners[n].add(p.index)
    return owners
