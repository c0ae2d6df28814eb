"""Split Conv/Linear layers into core-sized partition units and precompute
which unit spans can form a partition on the chip.

A unit is a crossbar tile block of one layer: an output-channel slice times
an input-row block. When a single output slice needs more crossbars than one
core holds, its rows are split into several units that form an
*accumulation group*; partition boundaries never cut through a group so
partial sums stay on chip.
"""

from __future__ import annotations

import bisect
import io
from dataclasses import dataclass

from . import kernels
from .errors import UnmappableLayer
from .hw_model import ChipSpec
from .network_ir import NetworkGraph, layer_stats


@dataclass(frozen=True)
class PartitionUnit:
    uid: int
    layer_id: int
    out_slice: tuple  # [start, end) output channels
    in_block: tuple  # [start, end) input rows
    crossbars_needed: int
    weight_bits: int
    group_id: int
    row_tiles: int
    col_tiles: int

    @property
    def channels(self) -> int:
        return self.out_slice[1] - self.out_slice[0]

    @property
    def rows(self) -> int:
        return self.in_block[1] - self.in_block[0]

    @property
    def weight_bytes(self) -> int:
        return -(-self.weight_bits // 8)


@dataclass(frozen=True, eq=False)
class DecomposedModel:
    graph: NetworkGraph
    units: tuple
    layer_ranges: dict  # layer_id -> (start, end) uid span
    group_atomicity: dict  # group_id -> (start, end) uid span
    layer_order: tuple  # mappable layer ids in topological order

    @property
    def M(self) -> int:
        return len(self.units)

    @property
    def boundaries(self) -> list:
        """Sorted group-aligned positions, including 0 and M."""
        return sorted({s for s, _ in self.group_atomicity.values()} | {self.M})

    def aligned(self) -> list:
        flags = [False] * (self.M + 1)
        for b in self.boundaries:
            flags[b] = True
        return flags

    def layer_of(self, uid: int) -> int:
        return self.units[uid].layer_id


def decompose(graph: NetworkGraph, chip: ChipSpec) -> DecomposedModel:
    xbar = chip.xbar
    xpc = chip.core.crossbars_per_core
    units: list = []
    layer_ranges = {}
    groups = {}
    order = []
    for node in graph.mappable_nodes():
        stats = layer_stats(graph, node.id, xbar.cell_bits)
        cpw = -(-node.weight_bits_per_element // xbar.cell_bits)
        if cpw > xbar.cols:
            raise UnmappableLayer(
                f"layer {node.id}: one weight needs {cpw} cells but a crossbar row has {xbar.cols}"
            )
        cout = node.attrs["cout"]
        ch_per_tile = xbar.cols // cpw
        col_tiles = -(-cout // ch_per_tile)
        row_tiles = -(-stats.rows // xbar.rows)
        wb = node.weight_bits_per_element
        start = len(units)

        if row_tiles <= xpc:
            slice_ch = min(xpc // row_tiles, col_tiles) * ch_per_tile
            blocks = [(0, stats.rows)]
        else:
            slice_ch = ch_per_tile
            step = xpc * xbar.rows
            blocks = [(r, min(r + step, stats.rows)) for r in range(0, stats.rows, step)]

        for c0 in range(0, cout, slice_ch):
            c1 = min(c0 + slice_ch, cout)
            gid = len(groups)
            g0 = len(units)
            ct = -(-(c1 - c0) * cpw // xbar.cols)
            for r0, r1 in blocks:
                rt = -(-(r1 - r0) // xbar.rows)
                units.append(
                    PartitionUnit(
                        uid=len(units),
                        layer_id=node.id,
                        out_slice=(c0, c1),
                        in_block=(r0, r1),
                        crossbars_needed=rt * ct,
                        weight_bits=(r1 - r0) * (c1 - c0) * wb,
                        group_id=gid,
                        row_tiles=rt,
                        col_tiles=ct,
                    )
                )
            groups[gid] = (g0, len(units))
            hist = [0] * (xpc + 1)
            for u in units[g0:]:
                hist[u.crossbars_needed] += 1
            if not kernels.ffd_feasible(hist, chip.num_cores, xpc):
                need = sum(u.crossbars_needed for u in units[g0:])
                raise UnmappableLayer(
                    f"layer {node.id} ({node.name or node.kind}): one output slice needs {need} crossbars, "
                    f"more than chip {chip.name} can hold"
                )
        layer_ranges[node.id] = (start, len(units))
        order.append(node.id)
    return DecomposedModel(graph, tuple(units), layer_ranges, groups, tuple(order))


@dataclass(frozen=True, eq=False)
class ValidityMap:
    """``max_end[i]``: largest aligned j such that every aligned prefix
    [i, j') with j' <= j packs on the chip at replication 1."""

    M: int
    max_end: tuple
    aligned_flags: tuple

    def is_valid(self, i: int, j: int) -> bool:
        if not (0 <= i < j <= self.M):
            return False
        return self.aligned_flags[i] and self.aligned_flags[j] and j <= self.max_end[i]

    def aligned(self, pos: int) -> bool:
        return self.aligned_flags[pos]

    @property
    def boundaries(self) -> list:
        return [p for p, f in enumerate(self.aligned_flags) if f]

    def valid_ends(self, i: int) -> list:
        if not self.aligned_flags[i]:
            return []
        b = self.boundaries
        lo = bisect.bisect_right(b, i)
        hi = bisect.bisect_right(b, self.max_end[i])
        return b[lo:hi]

    def valid_cells(self) -> int:
        return sum(len(self.valid_ends(i)) for i in range(self.M))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("start," + ",".join(str(j) for j in range(1, self.M + 1)) + "\n")
        for i in range(self.M):
            row = ["1" if self.is_valid(i, j) else "0" for j in range(1, self.M + 1)]
            buf.write(f"{i}," + ",".join(row) + "\n")
        return buf.getvalue()


def build_validity_map(model: DecomposedModel, chip: ChipSpec) -> ValidityMap:
    xbars = [u.crossbars_needed for u in model.units]
    flags = model.aligned()
    max_end = kernels.validity_frontier(xbars, flags, chip.num_cores, chip.core.crossbars_per_core)
    return ValidityMap(model.M, tuple(max_end), tuple(flags))
