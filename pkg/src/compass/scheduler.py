"""Lower a finalized partition group into per-core instruction streams.

Issue cycles follow the cost model's timeline exactly; nothing is simulated.
Partition k starts when partition k-1 ends. Inside it, weights are written
during [0, W), sample s starts at W + s * S (S = steady-state interval), and
each layer stage starts io_in + sum of earlier stage times after its sample.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass, field

from . import cost_model
from .errors import GlobalMemoryOverflow
from .partitioner import INPUT_TENSOR

OPCODES = ("WRITE_XBAR", "LOAD", "STORE", "MVM", "VFU", "SEND", "RECV", "BARRIER")
INSTR_HEADER = "# compass-instructions v1: core opcode operand bytes cycle"
TRACE_HEADER = "# compass-trace v1: address kind cycle"
ALIGN = 64
LINE_BYTES = 64


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


@dataclass(frozen=True, slots=True)
class Instruction:
    core: int
    opcode: str
    operand: str
    bytes: int
    cycle: int
    partition: int
    sample: int = -1  # -1 for per-partition instructions
    tensor: int | None = None
    address: int = -1

    def line(self) -> str:
        return f"{self.core} {self.opcode} {self.operand} {self.bytes} {self.cycle}"


@dataclass(frozen=True, slots=True)
class MemoryTraceEntry:
    address: int
    kind: str  # READ or WRITE
    cycle: int
    bytes: int

    def lines(self):
        for off in range(0, self.bytes, LINE_BYTES):
            yield f"0x{self.address + off:X} {self.kind} {self.cycle}"


class GlobalAllocation:
    """Global memory layout: a static weight region, then activations.

    Activations use a first-fit free list with 64 B alignment. A tensor is
    allocated when its first producer partition starts and freed after the
    last partition that loads it; model outputs are never freed.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.weights: dict = {}  # (uid, crossbar) -> (address, bytes)
        self.tensors: dict = {}  # tensor -> (address, size, stride)
        self.live: dict = {}  # tensor -> (first partition, last partition or None)
        self._top = 0
        self._free: list = []  # sorted [(start, size)]
        self.peak = 0

    def add_weight(self, key, nbytes: int):
        addr = self._top
        self.weights[key] = (addr, nbytes)
        self._top = _align(addr + nbytes)
        if self._top > self.capacity:
            raise GlobalMemoryOverflow(-1, self._top, self.capacity)

    def seal_weights(self):
        self._free = [(self._top, self.capacity - self._top)] if self._top < self.capacity else []
        self.peak = self._top

    def alloc(self, tensor, per_sample: int, batch: int, partition: int):
        stride = _align(per_sample)
        size = max(ALIGN, stride * batch)
        for i, (start, free) in enumerate(self._free):
            if free >= size:
                if free == size:
                    del self._free[i]
                else:
                    self._free[i] = (start + size, free - size)
                self.tensors[tensor] = (start, size, stride)
                self.peak = max(self.peak, start + size)
                return start
        available = max((f for _, f in self._free), default=0)
        raise GlobalMemoryOverflow(partition, size, available)

    def release(self, tensor):
        start, size, _ = self.tensors[tensor]
        bisect.insort(self._free, (start, size))
        merged = []
        for s, n in self._free:
            if merged and merged[-1][0] + merged[-1][1] == s:
                merged[-1] = (merged[-1][0], merged[-1][1] + n)
            else:
                merged.append((s, n))
        self._free = merged

    def address(self, tensor, sample: int, offset: int = 0) -> int:
        start, _, stride = self.tensors[tensor]
        return start + sample * stride + offset


@dataclass
class Schedule:
    streams: dict  # core -> [Instruction] in issue order
    allocation: GlobalAllocation
    report: cost_model.RunReport
    batch: int
    clock_ghz: float
    partition_windows: list = field(default_factory=list)  # (start cycle, end cycle)

    def instructions(self):
        """All instructions, ordered by (partition, cycle, core, sequence)."""
        seq = []
        for core in sorted(self.streams):
            seq.extend((ins.partition, ins.cycle, core, n, ins) for n, ins in enumerate(self.streams[core]))
        seq.sort(key=lambda x: x[:4])
        return [x[4] for x in seq]

    def counts(self) -> dict:
        out = dict.fromkeys(OPCODES, 0)
        for stream in self.streams.values():
            for ins in stream:
                out[ins.opcode] += 1
        return out

    def trace_entries(self) -> list:
        out = []
        for ins in self.instructions():
            if ins.opcode in ("WRITE_XBAR", "LOAD"):
                out.append(MemoryTraceEntry(ins.address, "READ", ins.cycle, ins.bytes))
            elif ins.opcode == "STORE":
                out.append(MemoryTraceEntry(ins.address, "WRITE", ins.cycle, ins.bytes))
        out.sort(key=lambda e: e.cycle)  # stable
        return out

    def trace_bytes(self) -> dict:
        totals = {"READ": 0, "WRITE": 0}
        for e in self.trace_entries():
            totals[e.kind] += e.bytes
        return totals

    def makespans(self) -> list:
        return [end - start for start, end in self.partition_windows]

    def dump(self) -> str:
        lines = [INSTR_HEADER]
        lines.extend(ins.line() for ins in self.instructions())
        return "\n".join(lines) + "\n"


def schedule(group, chip, B: int, overlap_writes=False, mvm_block: int = 64, report=None) -> Schedule:
    if B < 1:
        raise ValueError("batch must be >= 1")
    if mvm_block < 1:
        raise ValueError("mvm_block must be >= 1")
    if report is None:
        report = cost_model.group_cost(group, chip, B, overlap_writes=overlap_writes)
    clock = chip.clock_ghz
    cyc = lambda ns: int(round(ns * clock))
    index = group.partitions[0].index_ref
    graph = index.graph
    units = index.model.units
    alloc = GlobalAllocation(chip.dram.capacity_bytes)

    # weight slots, one per crossbar of each unit; replicas reread the same bytes
    for unit in units:
        for x, nbytes in enumerate(_split(unit.weight_bytes, unit.crossbars_needed)):
            alloc.add_weight((unit.uid, x), nbytes)
    alloc.seal_weights()

    first_use, last_use = {}, {}
    for k, p in enumerate(group.partitions):
        for t, _ in p.exits:
            first_use.setdefault(t, k)
        for t, _ in p.entries:
            last_use[t] = k
    sinks = set(graph.sinks)

    streams: dict = defaultdict(list)
    windows = []
    t0 = 0.0
    for k, (part, cost) in enumerate(zip(group.partitions, report.partitions)):
        if k == 0 and INPUT_TENSOR in last_use:
            alloc.alloc(INPUT_TENSOR, index.full_bytes[INPUT_TENSOR], B, k)
        for t, _ in part.exits:
            if first_use[t] == k:
                alloc.alloc(t, index.full_bytes[t], B, k)
        start_cycle = cyc(t0)
        emit = lambda core, *a, **kw: streams[core].append(Instruction(core, *a, partition=k, **kw))

        # weight replacement, spread over W in proportion to bytes
        instances = sorted(part.instances(), key=lambda ur: part.core_map[(ur[0].uid, ur[1])])
        total_w = max(1, cost.weight_bytes)
        done = 0
        for unit, rep in instances:
            core, _ = part.core_map[(unit.uid, rep)]
            for x, nbytes in enumerate(_split(unit.weight_bytes, unit.crossbars_needed)):
                addr, _ = alloc.weights[(unit.uid, x)]
                emit(core, "WRITE_XBAR", f"w{unit.uid}.{x}.r{rep}", nbytes,
                     cyc(t0 + cost.write_latency * done / total_w), address=addr)
                done += nbytes

        stages = cost_model.stage_times(part, chip)
        steady = max(cost.bottleneck, cost.io_in, cost.io_out)
        first_core = part.core_map[(units[part.span[0]].uid, 0)][0]
        a, b = part.span

        def core_of_node(v):
            anchor = index.anchor[v] if not graph.node(v).mappable else index.model.layer_ranges[v][0]
            if graph.node(v).mappable:
                anchor = max(anchor, a)
            return part.core_map[(anchor, 0)][0] if a <= anchor < b else first_core

        load_core = {}
        for t, _ in part.entries:
            users = [v for v in index.nodes_in_span(a, b)
                     if (t == INPUT_TENSOR and not graph.node(v).inputs) or t in graph.node(v).inputs]
            load_core[t] = core_of_node(users[0]) if users else first_core
        store_off = {}
        for t, _ in part.exits:
            ch = index.channels_in_span(t, a, b) if graph.node(t).mappable else None
            store_off[t] = index.channel_bytes(t, 0, ch[0]) if ch else 0

        for s in range(B):
            base = t0 + cost.write_latency + s * steady
            at = base
            for t, nbytes in part.entries:
                emit(load_core[t], "LOAD", _tname(t), nbytes, cyc(at), sample=s, tensor=t,
                     address=alloc.address(t, s))
                at += nbytes / chip.dram.bandwidth + chip.dram.latency
            at = base + cost.io_in
            for st in stages:
                _emit_stage(emit, part, index, graph, chip, st, at, s, mvm_block, cyc)
                at += st.T
            for t, nbytes in part.exits:
                emit(core_of_node(t), "STORE", _tname(t), nbytes, cyc(at), sample=s, tensor=t,
                     address=alloc.address(t, s, store_off[t]))
                at += nbytes / chip.dram.bandwidth + chip.dram.latency

        end = t0 + cost.latency
        for core in sorted({c for c, _ in part.core_map.values()}):
            emit(core, "BARRIER", f"p{k}", 0, cyc(end))
        windows.append((start_cycle, cyc(end)))
        for t, last in last_use.items():
            if last == k and t not in sinks and t in alloc.tensors:
                alloc.release(t)
        for t, _ in part.exits:
            if t not in last_use and t not in sinks and first_use[t] == k:
                alloc.release(t)
        t0 = end

    for core in streams:
        streams[core].sort(key=lambda ins: (ins.partition, ins.cycle))  # stable
    return Schedule(dict(sorted(streams.items())), alloc, report, B, clock, windows)


def _emit_stage(emit, part, index, graph, chip, st, at, s, mvm_block, cyc):
    a, b = part.span
    lo, hi = index.model.layer_ranges[st.layer_id]
    lo, hi = max(a, lo), min(b, hi)
    units = index.model.units
    r = st.replication
    per_instance = -(-st.invocations // r)
    lat = chip.xbar.mvm_latency
    roots = {}
    for uid in range(lo, hi):
        unit = units[uid]
        roots.setdefault(unit.group_id, uid)
        for rep in range(r):
            core = part.core_map[(uid, rep)][0]
            for blk in range(0, per_instance, mvm_block):
                n = min(mvm_block, per_instance - blk)
                emit(core, "MVM", f"u{uid}.r{rep}+{blk}:{n}", 0, cyc(at + blk * lat), sample=s)
    t_acc = at + st.mvm_time
    psum = lambda u: st.invocations * -(-u.channels * index.act_bits // 8) // r
    for uid in range(lo, hi):
        unit = units[uid]
        root = roots[unit.group_id]
        if root == uid:
            continue
        for rep in range(r):
            src = part.core_map[(uid, rep)][0]
            dst = part.core_map[(root, rep)][0]
            if src == dst:
                continue
            tag = f"g{unit.group_id}.u{uid}.r{rep}"
            emit(src, "SEND", tag, psum(unit), cyc(t_acc), sample=s)
            emit(dst, "RECV", tag, psum(unit), cyc(t_acc), sample=s)
    t_vfu = t_acc + st.acc_overhead
    root_core = part.core_map[(lo, 0)][0]
    emit(root_core, "VFU", graph.node(st.layer_id).name or f"n{st.layer_id}", 0, cyc(t_vfu), sample=s)
    layer_end = index.model.layer_ranges[st.layer_id][1] - 1
    for anchor in sorted({x for x in (layer_end, 0) if lo <= x < hi}):
        for aux in index.aux_by_anchor.get(anchor, ()):
            core = part.core_map[(anchor, 0)][0]
            emit(core, "VFU", graph.node(aux).name or f"n{aux}", 0, cyc(t_vfu), sample=s)


def _split(total: int, parts: int) -> list:
    """Split ``total`` into ``parts`` near-equal integers (cumulative rounding)."""
    return [total * (i + 1) // parts - total * i // parts for i in range(parts)]


def _tname(t) -> str:
    return "input" if t == INPUT_TENSOR else f"t{t}"


def check_dependences(sched: Schedule) -> list:
    """Violations of the ordering rules; empty when the schedule is safe.

    Every LOAD byte must have been STOREd by an earlier partition at an
    earlier cycle (the network input is preloaded). Weight writes must sit
    between the previous partition's barrier and the partition's first load
    or MVM. SEND/RECV must pair up within a partition, and each core stream
    must be cycle-ordered.
    """
    problems = []
    stored: dict = defaultdict(list)  # (tensor, sample) -> [(lo, hi, cycle)]
    pending: list = []
    prev_barrier = -1
    current = None
    first_exec = {}
    last_write = defaultdict(lambda: -1)
    pairs = defaultdict(int)
    alloc = sched.allocation
    for ins in sched.instructions():
        if ins.partition != current:
            for key, iv in pending:
                stored[key].append(iv)
            pending = []
            current = ins.partition
        op = ins.opcode
        if op == "WRITE_XBAR":
            if ins.cycle < prev_barrier:
                problems.append(f"p{ins.partition}: weight write at {ins.cycle} before barrier {prev_barrier}")
            last_write[ins.partition] = max(last_write[ins.partition], ins.cycle)
        elif op == "BARRIER":
            prev_barrier = max(prev_barrier, ins.cycle)
        elif op in ("LOAD", "MVM"):
            first_exec.setdefault(ins.partition, ins.cycle)
        if op in ("LOAD", "STORE"):
            start, size, _ = alloc.tensors[ins.tensor]
            if not (start <= ins.address and ins.address + ins.bytes <= start + size):
                problems.append(f"p{ins.partition}: {op} {ins.operand} outside its allocation")
        if op == "STORE":
            pending.append(((ins.tensor, ins.sample), (ins.address, ins.address + ins.bytes, ins.cycle)))
        elif op == "LOAD" and ins.tensor != INPUT_TENSOR:
            ivs = sorted(iv for iv in stored[(ins.tensor, ins.sample)] if iv[2] < ins.cycle)
            if not _covers(ivs, ins.address, ins.address + ins.bytes):
                problems.append(f"p{ins.partition}: LOAD {ins.operand} sample {ins.sample} not stored before")
        elif op in ("SEND", "RECV"):
            pairs[(ins.partition, ins.sample, ins.operand)] += 1 if op == "SEND" else -1
    for k, w in last_write.items():
        if k in first_exec and w > first_exec[k]:
            problems.append(f"p{k}: weight write at {w} after execution began at {first_exec[k]}")
    problems.extend(f"p{k[0]}: unmatched SEND/RECV {k[2]}" for k, v in pairs.items() if v)
    for core, stream in sched.streams.items():
        if any(x.cycle > y.cycle for x, y in zip(stream, stream[1:])):
            problems.append(f"core {core}: stream not in cycle order")
    return problems


def _covers(ivs, lo, hi) -> bool:
    reach = lo
    for a, b, _ in ivs:
        if a > reach:
            break
        reach = max(reach, b)
        if reach >= hi:
            return True
    return reach >= hi


def write_instructions(sched: Schedule, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sched.dump())


def emit_trace(sched: Schedule, chip, path) -> int:
    """Write the DRAM trace; returns the number of transaction lines."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TRACE_HEADER + "\n")
        for entry in sched.trace_entries():
            for line in entry.lines():
                fh.write(line + "\n")
                n += 1
    return n


def trace_line_count(sched: Schedule) -> int:
    return sum(math.ceil(e.bytes / LINE_BYTES) for e in sched.trace_entries())
