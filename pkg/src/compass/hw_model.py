"""Hardware description of a crossbar-based in-memory accelerator chip.

A chip is a set of identical cores on a shared bus. Each core holds a fixed
number of crossbars plus vector units and local memory; weights that do not
fit on chip stream in from DRAM between partitions.

Chip files are flat INI documents with a single ``[chip]`` section. Every
physical quantity carries its unit in the key name.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ParseError, UnknownChip, ValidationError

FORMAT_VERSION = 1
BUILTIN_CHIPS = ("S", "M", "L")


@dataclass(frozen=True)
class CrossbarSpec:
    rows: int = 256
    cols: int = 256
    cell_bits: int = 1
    mvm_latency: float = 100.0  # ns per MVM invocation
    mvm_energy: float = 1300.0  # pJ per MVM invocation
    row_write_latency: float = 2.0  # ns per row
    write_energy: float = 0.02  # pJ per bit written

    @property
    def bits(self) -> int:
        return self.rows * self.cols * self.cell_bits


@dataclass(frozen=True)
class CoreSpec:
    crossbars_per_core: int = 16
    vfu_count: int = 12
    vfu_throughput: float = 12.0  # elements per ns
    local_mem_bytes: int = 65536
    vfu_power: float = 22.8  # mW
    local_mem_power: float = 18.0  # mW
    control_power: float = 8.0  # mW

    @property
    def power_active(self) -> float:
        """Active core power in mW (VFU + local memory + control)."""
        return self.vfu_power + self.local_mem_power + self.control_power


@dataclass(frozen=True)
class DramSpec:
    bandwidth: float = 12.8  # bytes per ns (12.8 GB/s)
    latency: float = 100.0  # ns, charged once per transferred tensor
    energy_per_byte: float = 20.0  # pJ
    capacity_bytes: int = 8 << 30


@dataclass(frozen=True)
class ChipSpec:
    name: str
    num_cores: int
    core: CoreSpec = field(default_factory=CoreSpec)
    xbar: CrossbarSpec = field(default_factory=CrossbarSpec)
    bus_bandwidth: float = 32.0  # bytes per ns
    bus_latency: float = 10.0  # ns per hop
    static_power: float = 1.0  # W
    dram: DramSpec = field(default_factory=DramSpec)
    clock_ghz: float = 1.0

    @property
    def core_capacity_bits(self) -> int:
        return self.core.crossbars_per_core * self.xbar.bits

    @property
    def chip_capacity_bits(self) -> int:
        return self.num_cores * self.core_capacity_bits

    @property
    def total_crossbars(self) -> int:
        return self.num_cores * self.core.crossbars_per_core

    @property
    def capacity_mib(self) -> float:
        return self.chip_capacity_bits / 8 / 2**20

    def config_hash(self) -> str:
        return hashlib.sha256(dump_chip_spec(self).encode()).hexdigest()[:16]


# key -> (section object, attribute, type)
_KEYS = {
    "name": ("chip", "name", str),
    "num_cores": ("chip", "num_cores", int),
    "crossbars_per_core": ("core", "crossbars_per_core", int),
    "vfu_count": ("core", "vfu_count", int),
    "vfu_throughput_elems_per_ns": ("core", "vfu_throughput", float),
    "local_mem_bytes": ("core", "local_mem_bytes", int),
    "vfu_power_mw": ("core", "vfu_power", float),
    "local_mem_power_mw": ("core", "local_mem_power", float),
    "control_power_mw": ("core", "control_power", float),
    "xbar_rows": ("xbar", "rows", int),
    "xbar_cols": ("xbar", "cols", int),
    "xbar_cell_bits": ("xbar", "cell_bits", int),
    "xbar_mvm_latency_ns": ("xbar", "mvm_latency", float),
    "xbar_mvm_energy_pj": ("xbar", "mvm_energy", float),
    "xbar_row_write_latency_ns": ("xbar", "row_write_latency", float),
    "xbar_write_energy_pj_per_bit": ("xbar", "write_energy", float),
    "bus_bandwidth_bytes_per_ns": ("chip", "bus_bandwidth", float),
    "bus_latency_ns": ("chip", "bus_latency", float),
    "static_power_w": ("chip", "static_power", float),
    "clock_ghz": ("chip", "clock_ghz", float),
    "dram_bandwidth_bytes_per_ns": ("dram", "bandwidth", float),
    "dram_latency_ns": ("dram", "latency", float),
    "dram_energy_pj_per_byte": ("dram", "energy_per_byte", float),
    "dram_capacity_bytes": ("dram", "capacity_bytes", int),
}


def validate(spec: ChipSpec) -> ChipSpec:
    """Check every invariant; raise ValidationError naming the first bad field."""
    positive = {
        "num_cores": spec.num_cores,
        "crossbars_per_core": spec.core.crossbars_per_core,
        "xbar_rows": spec.xbar.rows,
        "xbar_cols": spec.xbar.cols,
        "xbar_cell_bits": spec.xbar.cell_bits,
        "dram_bandwidth_bytes_per_ns": spec.dram.bandwidth,
        "bus_bandwidth_bytes_per_ns": spec.bus_bandwidth,
        "vfu_throughput_elems_per_ns": spec.core.vfu_throughput,
        "clock_ghz": spec.clock_ghz,
        "dram_capacity_bytes": spec.dram.capacity_bytes,
    }
    for key, value in positive.items():
        if not value > 0:
            raise ValidationError(key, f"must be > 0, got {value}")
    non_negative = {
        "xbar_mvm_latency_ns": spec.xbar.mvm_latency,
        "xbar_mvm_energy_pj": spec.xbar.mvm_energy,
        "xbar_row_write_latency_ns": spec.xbar.row_write_latency,
        "xbar_write_energy_pj_per_bit": spec.xbar.write_energy,
        "dram_latency_ns": spec.dram.latency,
        "dram_energy_pj_per_byte": spec.dram.energy_per_byte,
        "bus_latency_ns": spec.bus_latency,
        "static_power_w": spec.static_power,
        "vfu_power_mw": spec.core.vfu_power,
        "local_mem_power_mw": spec.core.local_mem_power,
        "control_power_mw": spec.core.control_power,
        "local_mem_bytes": spec.core.local_mem_bytes,
        "vfu_count": spec.core.vfu_count,
    }
    for key, value in non_negative.items():
        if value < 0:
            raise ValidationError(key, f"must be >= 0, got {value}")
    return spec


def parse_chip_spec(text: str) -> ChipSpec:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"malformed chip file: {exc}") from exc
    if "chip" not in parser:
        raise ParseError("missing [chip] section")
    section = parser["chip"]
    version = section.get("format_version")
    if version is None:
        raise ParseError("missing format_version")
    if version.strip() != str(FORMAT_VERSION):
        raise ParseError(f"unsupported format_version {version!r}")

    values: dict[str, dict] = {"chip": {}, "core": {}, "xbar": {}, "dram": {}}
    for key, raw in section.items():
        if key == "format_version":
            continue
        if key not in _KEYS:
            raise ParseError(f"unknown key {key!r}")
        group, attr, typ = _KEYS[key]
        try:
            values[group][attr] = typ(raw.strip())
        except ValueError as exc:
            raise ParseError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc
    for required in ("name", "num_cores"):
        if required not in values["chip"]:
            raise ParseError(f"missing key {required!r}")
    spec = ChipSpec(
        core=CoreSpec(**values["core"]),
        xbar=CrossbarSpec(**values["xbar"]),
        dram=DramSpec(**values["dram"]),
        **values["chip"],
    )
    return validate(spec)


def load_chip_spec(path) -> ChipSpec:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_chip_spec(text)


def dump_chip_spec(spec: ChipSpec) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser["chip"] = {"format_version": str(FORMAT_VERSION)}
    parts = {
        "chip": spec,
        "core": spec.core,
        "xbar": spec.xbar,
        "dram": spec.dram,
    }
    for key, (group, attr, _typ) in _KEYS.items():
        parser["chip"][key] = repr(getattr(parts[group], attr)) if _typ is float else str(
            getattr(parts[group], attr)
        )
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def save_chip_spec(spec: ChipSpec, path) -> None:
    Path(path).write_text(dump_chip_spec(spec))


def builtin_chip(name: str) -> ChipSpec:
    if name not in BUILTIN_CHIPS:
        raise UnknownChip(f"unknown chip {name!r}; expected one of {', '.join(BUILTIN_CHIPS)}")
    text = resources.files("compass.data.chips").joinpath(f"{name}.ini").read_text()
    return parse_chip_spec(text)


def resolve_chip(name_or_path: str) -> ChipSpec:
    """Builtin chip label or path to a chip file."""
    if name_or_path in BUILTIN_CHIPS:
        return builtin_chip(name_or_path)
    if Path(name_or_path).exists():
        return load_chip_spec(name_or_path)
    raise UnknownChip(f"{name_or_path!r} is neither a builtin chip nor a readable file")


def replace(spec: ChipSpec, **changes) -> ChipSpec:
    return validate(dataclasses.replace(spec, **changes))
