"""Command-line driver: compile, compare, sweep, models, chips."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, cost_model, ga, hw_model, network_ir, partitioner, scheduler
from .decomposer import build_validity_map, decompose
from .errors import CompassError, UnmappableLayer

FORMAT_VERSION = 1
SCHEMES = ("compass", "greedy", "layerwise")

log = logging.getLogger("compass")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class CompileRequest:
    model: str
    chip: str
    scheme: str = "compass"
    objective: str = "latency"
    batch: int = 16
    seed: int = 0
    generations: int | None = None
    population: int | None = None
    overlap_writes: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("--batch must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"--scheme must be one of {', '.join(SCHEMES)}")
        if self.objective not in cost_model.OBJECTIVES:
            raise ValueError(f"--objective must be one of {', '.join(cost_model.OBJECTIVES)}")

    def ga_params(self) -> ga.GaParams:
        d = ga.GaParams()
        pop = self.population or d.population
        gens = d.generations if self.generations is None else self.generations
        if pop == d.population:
            return ga.GaParams(generations=gens, seed=self.seed)
        return ga.GaParams.scaled(pop, gens, seed=self.seed)


class Session:
    """Model and chip resolved once; shared by every scheme run."""

    def __init__(self, model: str, chip: str):
        self.graph = network_ir.resolve_network(model)
        self.chip = hw_model.resolve_chip(chip)
        self.model = decompose(self.graph, self.chip)
        self.vmap = build_validity_map(self.model, self.chip)
        self.factory = partitioner.PartitionFactory(self.model, self.chip)

    def provenance(self, req: CompileRequest) -> dict:
        model_doc = network_ir.dump_network(self.graph)
        return {
            "tool": "compass",
            "version": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
            "model": self.graph.name,
            "model_hash": hashlib.sha256(model_doc.encode()).hexdigest()[:16],
            "chip": self.chip.name,
            "chip_hash": self.chip.config_hash(),
            "seed": req.seed,
            "label": f"{self.graph.name}-{self.chip.name}-{req.batch}",
        }

    def run(self, req: CompileRequest):
        """Returns (report, group, ga result or None)."""
        result = None
        if req.scheme == "compass":
            evaluator = ga.Evaluator(self.model, self.chip, req.batch, req.objective, req.overlap_writes,
                                     workers=req.workers, factory=self.factory)
            search = ga.CompassGA(self.model, self.chip, self.vmap, req.ga_params(), evaluator=evaluator)
            try:
                result = search.run()
            finally:
                evaluator.close()
            group = result.group
        elif req.scheme == "greedy":
            group = partitioner.greedy_group(self.model, self.chip, self.vmap, self.factory)
        else:
            group = partitioner.layerwise_group(self.model, self.chip, self.vmap, self.factory)
        report = cost_model.group_cost(group, self.chip, req.batch, req.objective, req.overlap_writes,
                                       scheme=req.scheme)
        return report, group, result


def _dump_json(doc, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _report_doc(session, req, report, group, result) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "provenance": session.provenance(req),
        "request": {
            "scheme": req.scheme,
            "objective": req.objective,
            "batch": req.batch,
            "overlap_writes": req.overlap_writes,
        },
        "report": report.to_dict(session.chip),
        "group": group.to_dict(),
    }
    if result is not None:
        p = req.ga_params()
        doc["ga"] = {
            "generations": p.generations,
            "population": p.population,
            "n_sel": p.n_sel,
            "n_mut": p.n_mut,
            "generations_run": result.generations_run,
            "stopped_early": result.stopped_early,
            "best_pgf_history": result.history,
        }
    return doc


def cmd_compile(args) -> int:
    req = _request(args, args.scheme)
    session = Session(args.model, args.chip)
    report, group, result = session.run(req)
    out = Path(args.out)
    stem = out / (args.name or f"{session.graph.name}-{session.chip.name}-{req.batch}-{req.scheme}")
    _dump_json(_report_doc(session, req, report, group, result), Path(f"{stem}.json"))
    Path(f"{stem}.partitions.csv").write_text(cost_model.per_partition_csv(report), encoding="utf-8")
    if result is not None:
        Path(f"{stem}.convergence.csv").write_text(result.log_csv(), encoding="utf-8")
    if not args.no_schedule:
        sched = scheduler.schedule(group, session.chip, req.batch, req.overlap_writes, report=report)
        problems = scheduler.check_dependences(sched)
        if problems:
            raise CompassError("schedule failed dependence check: " + "; ".join(problems[:5]))
        scheduler.write_instructions(sched, f"{stem}.instructions.txt")
        if not args.no_trace:
            scheduler.emit_trace(sched, session.chip, f"{stem}.trace.txt")
    print(f"{session.graph.name}-{session.chip.name}-{req.batch} {req.scheme}: "
          f"{len(report.partitions)} partitions, {report.throughput:.1f} samples/s, "
          f"EDP/sample {report.edp_per_sample:.4g} pJ*ns -> {stem}.json")
    return 0


def cmd_compare(args) -> int:
    session = Session(args.model, args.chip)
    rows = {}
    for scheme in SCHEMES:
        req = _request(args, scheme)
        report, group, _ = session.run(req)
        rows[scheme] = report
    base = _request(args, "compass")
    comp = rows["compass"]
    ratios = {}
    for other in ("greedy", "layerwise"):
        r = rows[other]
        ratios[other] = {
            "throughput": comp.throughput / r.throughput,
            "edp": r.edp_per_sample / comp.edp_per_sample,
            "pgf": r.pgf / comp.pgf,
        }
    doc = {
        "format_version": FORMAT_VERSION,
        "provenance": session.provenance(base),
        "batch": base.batch,
        "objective": base.objective,
        "reports": {k: v.to_dict(session.chip) for k, v in rows.items()},
        "compass_over": ratios,
    }
    out = Path(args.out)
    stem = out / (args.name or f"{session.graph.name}-{session.chip.name}-{base.batch}-compare")
    _dump_json(doc, Path(f"{stem}.json"))
    lines = ["scheme,partitions,throughput_samples_per_s,latency_ns,energy_per_sample_pj,edp_per_sample,pgf"]
    for k, r in rows.items():
        lines.append(f"{k},{len(r.partitions)},{r.throughput!r},{r.end_to_end_latency!r},"
                     f"{r.energy_per_sample!r},{r.edp_per_sample!r},{r.pgf!r}")
    Path(f"{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"{'scheme':<10} {'parts':>5} {'samples/s':>12} {'EDP/sample':>12}")
    for k, r in rows.items():
        print(f"{k:<10} {len(r.partitions):>5} {r.throughput:>12.1f} {r.edp_per_sample:>12.4g}")
    for k, v in ratios.items():
        print(f"compass vs {k}: throughput x{v['throughput']:.3f}, EDP x{v['edp']:.3f}")
    return 0


def cmd_sweep(args) -> int:
    try:
        batches = [int(b) for b in args.batches.split(",") if b.strip()]
    except ValueError:
        raise ValueError(f"--batches must be a comma-separated list of integers, got {args.batches!r}")
    if not batches:
        raise ValueError("--batches is empty")
    session = Session(args.model, args.chip)
    rows = []
    for b in batches:
        args.batch = b
        req = _request(args, args.scheme)
        report, group, result = session.run(req)
        rows.append((req, report))
    doc = {
        "format_version": FORMAT_VERSION,
        "provenance": session.provenance(rows[0][0]),
        "scheme": args.scheme,
        "batches": batches,
        "throughput": [r.throughput for _, r in rows],
        "write_mvm_energy_ratio": [r.write_mvm_ratio(session.chip) for _, r in rows],
        "write_energy_per_sample_pj": [r.write_energy_per_sample for _, r in rows],
        "reports": [r.to_dict(session.chip) for _, r in rows],
    }
    out = Path(args.out)
    stem = out / (args.name or f"{session.graph.name}-{session.chip.name}-{args.scheme}-sweep")
    _dump_json(doc, Path(f"{stem}.json"))
    lines = ["batch,partitions,throughput_samples_per_s,write_mvm_energy_ratio,write_energy_per_sample_pj,"
             "edp_per_sample"]
    for req, r in rows:
        lines.append(f"{req.batch},{len(r.partitions)},{r.throughput!r},{r.write_mvm_ratio(session.chip)!r},"
                     f"{r.write_energy_per_sample!r},{r.edp_per_sample!r}")
    Path(f"{stem}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for req, r in rows:
        print(f"B={req.batch:<4} {r.throughput:>12.1f} samples/s  write/MVM energy {r.write_mvm_ratio(session.chip):.4f}")
    return 0


def cmd_models(args) -> int:
    if args.dump:
        sys.stdout.write(network_ir.dump_network(network_ir.resolve_network(args.dump)))
        return 0
    for name in network_ir.BENCHMARKS:
        g = network_ir.build_benchmark(name)
        fp = network_ir.weight_footprint_mib(g)
        print(f"{name:<12} {len(g.mappable_nodes()):>3} layers  {fp['Total']:.5g} MiB")
    return 0


def cmd_chips(args) -> int:
    if args.dump:
        sys.stdout.write(hw_model.dump_chip_spec(hw_model.resolve_chip(args.dump)))
        return 0
    for name in hw_model.BUILTIN_CHIPS:
        c = hw_model.builtin_chip(name)
        print(f"{name:<3} {c.num_cores:>3} cores x {c.core.crossbars_per_core:>2} crossbars  "
              f"{c.capacity_mib:g} MiB  {c.static_power:g} W")
    return 0


def _request(args, scheme) -> CompileRequest:
    return CompileRequest(
        model=args.model,
        chip=args.chip,
        scheme=scheme,
        objective=args.objective,
        batch=args.batch,
        seed=args.seed,
        generations=args.generations,
        population=args.population,
        overlap_writes=args.overlap_writes,
        workers=_workers(args.workers),
    )


def _workers(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("COMPASS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"COMPASS_WORKERS must be an integer, got {env!r}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="compass", description=__doc__)
    p.add_argument("--version", action="version", version=f"compass {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, with_scheme=True, batch=True):
        sp.add_argument("--model", required=True, help="builtin name or network JSON file")
        sp.add_argument("--chip", required=True, help="builtin label (S, M, L) or chip INI file")
        if with_scheme:
            sp.add_argument("--scheme", default="compass", choices=SCHEMES)
        sp.add_argument("--objective", default="latency", choices=cost_model.OBJECTIVES)
        if batch:
            sp.add_argument("--batch", type=int, default=16)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--generations", type=int, default=None)
        sp.add_argument("--population", type=int, default=None)
        sp.add_argument("--overlap-writes", action="store_true",
                        help="start weight replacement while the previous partition drains")
        sp.add_argument("--workers", type=int, default=None, help="evaluation processes (env COMPASS_WORKERS)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--name", default=None, help="output file stem")

    c = sub.add_parser("compile", help="compile with one scheme")
    common(c)
    c.add_argument("--no-schedule", action="store_true", help="skip instruction and trace output")
    c.add_argument("--no-trace", action="store_true", help="skip the DRAM trace")
    c.set_defaults(func=cmd_compile)

    cp = sub.add_parser("compare", help="compass vs greedy vs layerwise")
    common(cp, with_scheme=False)
    cp.set_defaults(func=cmd_compare)

    sw = sub.add_parser("sweep", help="one run per batch size")
    common(sw, batch=False)
    sw.add_argument("--batches", default="1,2,4,8,16")
    sw.set_defaults(func=cmd_sweep)

    m = sub.add_parser("models", help="list builtin models or dump one as JSON")
    m.add_argument("--dump", metavar="MODEL")
    m.set_defaults(func=cmd_models)

    ch = sub.add_parser("chips", help="list builtin chips or dump one as INI")
    ch.add_argument("--dump", metavar="CHIP")
    ch.set_defaults(func=cmd_chips)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help and --version exit 0
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UnmappableLayer as exc:
        print(f"compass: infeasible model/chip pair: {exc}", file=sys.stderr)
        return 2
    except (CompassError, ValueError, OSError) as exc:
        print(f"compass: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
