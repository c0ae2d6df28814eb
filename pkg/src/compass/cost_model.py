"""Closed-form latency / energy model for batched, pipelined partition execution.

Inside a partition every Conv/Linear layer is one pipeline stage. A batch of
B samples streams through after the partition's weights have been written:

    latency(B) = W + io_in + fill + (B - 1) * max(bottleneck, io_in, io_out) + io_out

Units: time in ns, energy in pJ, sizes in bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

OBJECTIVES = ("latency", "edp")
W_NS_TO_PJ = 1e3  # 1 W for 1 ns = 1000 pJ


@dataclass(frozen=True)
class StageTime:
    layer_id: int
    invocations: int
    replication: int
    groups: int
    mvm_time: float
    acc_overhead: float
    vfu_work: float  # ns of vector work on a single core
    vfu_time: float

    @property
    def T(self) -> float:
        return self.mvm_time + self.acc_overhead + self.vfu_time


def stage_time(layer_id, partition, chip, replication: int | None = None) -> StageTime:
    """Per-sample time of one layer's stage inside ``partition``.

    Partial sums of accumulation groups cross the shared bus once per
    invocation. Vector work covers the layer's output slice plus every
    non-crossbar node anchored to it, spread over one core per replicated
    output group (at most every core on the chip).
    """
    index = partition.index_ref
    graph = index.graph
    a, b = partition.span
    s, e = index.model.layer_ranges[layer_id]
    lo, hi = max(a, s), min(b, e)
    if lo >= hi:
        raise ValueError(f"layer {layer_id} has no units in span {partition.span}")
    r = replication if replication is not None else partition.replication.get(layer_id, 1)
    node = graph.node(layer_id)
    shape = graph.shapes[layer_id]
    invocations = shape[1] * shape[2] if node.kind == "Conv" else 1

    units = index.model.units
    groups: dict = {}
    for uid in range(lo, hi):
        groups.setdefault(units[uid].group_id, []).append(units[uid])
    psum_bytes = 0
    for members in groups.values():
        if len(members) > 1:
            psum_bytes += len(members) * (-(-members[0].channels * index.act_bits // 8))
    acc = 0.0
    if psum_bytes:
        acc = invocations * (psum_bytes / chip.bus_bandwidth + chip.bus_latency)

    c0, c1 = units[lo].out_slice[0], units[hi - 1].out_slice[1]
    elems = (c1 - c0) * index.elems_per_channel[layer_id]
    # aux nodes anchor at a layer's last unit, or at uid 0 without a crossbar ancestor
    for anchor in {x for x in (e - 1, 0) if lo <= x < hi}:
        for aux in index.aux_by_anchor.get(anchor, ()):
            elems += _elements(graph.shapes[aux])
    vfu_work = elems / chip.core.vfu_throughput
    lanes = min(min(r, invocations) * len(groups), chip.num_cores)
    mvm = -(-invocations // r) * chip.xbar.mvm_latency
    return StageTime(layer_id, invocations, r, len(groups), mvm, acc, vfu_work, vfu_work / lanes)


def _elements(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def stage_times(partition, chip) -> list:
    return [stage_time(l, partition, chip) for l in partition.layers]


@dataclass(frozen=True)
class PartitionCost:
    index: int
    span: tuple
    batch: int
    write_latency: float  # W_P actually charged (after optional overlap)
    write_latency_raw: float
    io_in: float
    io_out: float
    fill: float
    bottleneck: float
    first_stage: float
    latency: float
    energy: dict  # mvm, write, dram, static (pJ, whole batch)
    fitness: float
    weight_bytes: int
    entry_bytes: int
    exit_bytes: int
    write_bits: int
    crossbars_written: int
    mvm_ops: int  # crossbar activations for the whole batch
    num_layers: int

    @property
    def energy_total(self) -> float:
        return self.energy["mvm"] + self.energy["write"] + self.energy["dram"] + self.energy["static"]

    @property
    def dram_bytes(self) -> int:
        return self.weight_bytes + self.batch * (self.entry_bytes + self.exit_bytes)

    @property
    def drain(self) -> float:
        """Time between the first stage finishing and the last one finishing."""
        return self.fill - self.first_stage

    def to_dict(self) -> dict:
        d = asdict(self)
        d["span"] = list(self.span)
        d["energy_total"] = self.energy_total
        d["dram_bytes"] = self.dram_bytes
        return d


@dataclass(frozen=True)
class PartitionBase:
    """Batch-independent quantities of a finalized partition."""

    write_latency: float
    io_in: float
    io_out: float
    fill: float
    bottleneck: float
    first_stage: float
    weight_bytes: int
    entry_bytes: int
    exit_bytes: int
    write_bits: int
    crossbars_written: int
    mvm_per_sample: int
    num_layers: int


def partition_base(partition, chip) -> PartitionBase:
    stages = stage_times(partition, chip)
    rows_per_core = [0] * chip.num_cores
    weight_bytes = write_bits = xbars = 0
    for unit, rep in partition.instances():
        core, _ = partition.core_map[(unit.uid, rep)]
        rows_per_core[core] += unit.rows * unit.col_tiles
        weight_bytes += unit.weight_bytes
        write_bits += unit.weight_bits
        xbars += unit.crossbars_needed
    dram = chip.dram
    write = max(weight_bytes / dram.bandwidth, max(rows_per_core) * chip.xbar.row_write_latency)
    entry_bytes = sum(b for _, b in partition.entries)
    exit_bytes = sum(b for _, b in partition.exits)
    io_in = entry_bytes / dram.bandwidth + len(partition.entries) * dram.latency if partition.entries else 0.0
    io_out = exit_bytes / dram.bandwidth + len(partition.exits) * dram.latency if partition.exits else 0.0
    mvm = 0
    for st in stages:
        a, b = partition.span
        s, e = partition.index_ref.model.layer_ranges[st.layer_id]
        active = sum(u.crossbars_needed for u in partition.index_ref.model.units[max(a, s):min(b, e)])
        mvm += st.invocations * active
    return PartitionBase(
        write_latency=write,
        io_in=io_in,
        io_out=io_out,
        fill=sum(st.T for st in stages),
        bottleneck=max(st.T for st in stages),
        first_stage=stages[0].T,
        weight_bytes=weight_bytes,
        entry_bytes=entry_bytes,
        exit_bytes=exit_bytes,
        write_bits=write_bits,
        crossbars_written=xbars,
        mvm_per_sample=mvm,
        num_layers=len(stages),
    )


def cost_from_base(base: PartitionBase, chip, batch: int, objective="latency", *, index=0, span=(0, 0),
                   write_latency: float | None = None) -> PartitionCost:
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    w = base.write_latency if write_latency is None else write_latency
    steady = max(base.bottleneck, base.io_in, base.io_out)
    latency = w + base.io_in + base.fill + (batch - 1) * steady + base.io_out
    dram_bytes = base.weight_bytes + batch * (base.entry_bytes + base.exit_bytes)
    energy = {
        "mvm": base.mvm_per_sample * batch * chip.xbar.mvm_energy,
        "write": base.write_bits * chip.xbar.write_energy,
        "dram": dram_bytes * chip.dram.energy_per_byte,
        "static": chip.static_power * latency * W_NS_TO_PJ,
    }
    total = energy["mvm"] + energy["write"] + energy["dram"] + energy["static"]
    fitness = latency if objective == "latency" else latency * total
    return PartitionCost(
        index=index,
        span=tuple(span),
        batch=batch,
        write_latency=w,
        write_latency_raw=base.write_latency,
        io_in=base.io_in,
        io_out=base.io_out,
        fill=base.fill,
        bottleneck=base.bottleneck,
        first_stage=base.first_stage,
        latency=latency,
        energy=energy,
        fitness=fitness,
        weight_bytes=base.weight_bytes,
        entry_bytes=base.entry_bytes,
        exit_bytes=base.exit_bytes,
        write_bits=base.write_bits,
        crossbars_written=base.crossbars_written,
        mvm_ops=base.mvm_per_sample * batch,
        num_layers=base.num_layers,
    )


def partition_cost(partition, chip, batch: int, objective="latency", write_latency: float | None = None) -> PartitionCost:
    base = partition_base(partition, chip)
    return cost_from_base(base, chip, batch, objective, index=partition.index, span=partition.span,
                          write_latency=write_latency)


def overlapped_writes(costs_raw: list) -> list:
    """Write latency per partition when weight replacement may start while the
    previous partition drains: W' = max(0, W - drain_prev)."""
    out = []
    prev = None
    for c in costs_raw:
        w = c.write_latency_raw if prev is None else max(0.0, c.write_latency_raw - prev.drain)
        out.append(w)
        prev = c
    return out


@dataclass
class RunReport:
    scheme: str
    batch: int
    objective: str
    partitions: list  # PartitionCost
    overlap_writes: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def end_to_end_latency(self) -> float:
        """ns a sample spends from first load to last store (batch-inclusive)."""
        return sum(p.latency for p in self.partitions)

    @property
    def throughput(self) -> float:
        """samples per second"""
        return self.batch / self.end_to_end_latency * 1e9

    @property
    def energy(self) -> dict:
        keys = ("mvm", "write", "dram", "static")
        return {k: sum(p.energy[k] for p in self.partitions) for k in keys}

    @property
    def energy_total(self) -> float:
        return sum(p.energy_total for p in self.partitions)

    @property
    def energy_per_sample(self) -> float:
        return self.energy_total / self.batch

    @property
    def edp_per_sample(self) -> float:
        return self.energy_per_sample * self.end_to_end_latency

    @property
    def pgf(self) -> float:
        return sum(p.fitness for p in self.partitions)

    @property
    def weight_bytes(self) -> int:
        return sum(p.weight_bytes for p in self.partitions)

    @property
    def io_bytes(self) -> int:
        """Activation bytes moved to and from DRAM for the whole batch."""
        return sum(self.batch * (p.entry_bytes + p.exit_bytes) for p in self.partitions)

    @property
    def dram_read_bytes(self) -> int:
        return sum(p.weight_bytes + self.batch * p.entry_bytes for p in self.partitions)

    @property
    def dram_write_bytes(self) -> int:
        return sum(self.batch * p.exit_bytes for p in self.partitions)

    @property
    def write_energy_per_sample(self) -> float:
        return self.energy["write"] / self.batch

    def weight_load_energy(self, chip) -> float:
        return self.weight_bytes * chip.dram.energy_per_byte

    def write_mvm_ratio(self, chip) -> float:
        """(crossbar write + weight DRAM load) energy relative to MVM energy."""
        mvm = self.energy["mvm"]
        return (self.energy["write"] + self.weight_load_energy(chip)) / mvm if mvm else float("inf")

    def to_dict(self, chip=None) -> dict:
        d = {
            "scheme": self.scheme,
            "batch": self.batch,
            "objective": self.objective,
            "overlap_writes": self.overlap_writes,
            "num_partitions": len(self.partitions),
            "pgf": self.pgf,
            "throughput_samples_per_s": self.throughput,
            "end_to_end_latency_ns": self.end_to_end_latency,
            "energy_pj": self.energy,
            "energy_total_pj": self.energy_total,
            "energy_per_sample_pj": self.energy_per_sample,
            "edp_per_sample_pj_ns": self.edp_per_sample,
            "write_energy_per_sample_pj": self.write_energy_per_sample,
            "dram_read_bytes": self.dram_read_bytes,
            "dram_write_bytes": self.dram_write_bytes,
            "partitions": [p.to_dict() for p in self.partitions],
        }
        if chip is not None:
            d["write_mvm_energy_ratio"] = self.write_mvm_ratio(chip)
        d.update(self.extra)
        return d


def group_cost(group, chip, batch: int, objective="latency", overlap_writes=False, scheme="", bases=None) -> RunReport:
    """Cost every partition of a finalized group and total them."""
    if bases is None:
        bases = [partition_base(p, chip) for p in group.partitions]
    raw = [cost_from_base(b, chip, batch, objective, index=p.index, span=p.span)
           for b, p in zip(bases, group.partitions)]
    if overlap_writes:
        ws = overlapped_writes(raw)
        raw = [cost_from_base(b, chip, batch, objective, index=p.index, span=p.span, write_latency=w)
               for b, p, w in zip(bases, group.partitions, ws)]
    return RunReport(scheme, batch, objective, raw, overlap_writes)


def per_partition_csv(report: RunReport) -> str:
    cols = ["index", "span_start", "span_end", "write_latency_ns", "io_in_ns", "fill_ns", "bottleneck_ns",
            "io_out_ns", "latency_ns", "energy_mvm_pj", "energy_write_pj", "energy_dram_pj",
            "energy_static_pj", "fitness"]
    lines = [",".join(cols)]
    for p in report.partitions:
        row = [p.index, p.span[0], p.span[1], p.write_latency, p.io_in, p.fill, p.bottleneck, p.io_out,
               p.latency, p.energy["mvm"], p.energy["write"], p.energy["dram"], p.energy["static"], p.fitness]
        lines.append(",".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    return "\n".join(lines) + "\n"
