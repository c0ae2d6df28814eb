"""Compare the compiled kernels against the pure-Python fallback.

Kernel inputs are captured from real benchmark workloads, then replayed on
each backend. ``--e2e`` also times a short GA run in a subprocess per backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--e2e]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from compass import hw_model, kernels, network_ir, partitioner
from compass.decomposer import build_validity_map, decompose

E2E = ("from compass import ga, hw_model, network_ir; from compass.decomposer import decompose, build_validity_map;"
       "c = hw_model.builtin_chip('S'); m = decompose(network_ir.build_benchmark('vgg16'), c);"
       "ga.run_compass(m, c, build_validity_map(m, c), ga.GaParams(generations=5, seed=0))")


def capture_inputs(groups_per_pair: int):
    """Frontier and replication inputs seen while building random partition groups."""
    frontier, replication = [], []
    real = kernels.allocate_replication

    def record(*args):
        replication.append(args)
        return real(*args)

    kernels.allocate_replication = record
    try:
        for net in network_ir.BENCHMARKS:
            for label in "SML":
                chip = hw_model.builtin_chip(label)
                model = decompose(network_ir.build_benchmark(net), chip)
                frontier.append(([u.crossbars_needed for u in model.units], model.aligned(), chip.num_cores,
                                 chip.core.crossbars_per_core))
                vmap = build_validity_map(model, chip)
                factory = partitioner.PartitionFactory(model, chip)
                rng = np.random.default_rng(0)
                for _ in range(groups_per_pair):
                    factory.group(partitioner.random_boundaries(vmap, rng))
    finally:
        kernels.allocate_replication = real
    return frontier, replication


def bench(impl, frontier, replication, repeat):
    def run_frontier():
        for args in frontier:
            impl.validity_frontier(*args)

    def run_replication():
        for args in replication:
            impl.allocate_replication(*args)

    def run_stage():
        for args in replication:
            inv, acc, vfu, groups = args[:4]
            for k in range(len(inv)):
                impl.stage_ns(inv[k], 2, groups[k], 100.0, acc[k], vfu[k], 16)

    return {name: min(timeit.repeat(fn, number=1, repeat=repeat))
            for name, fn in (("validity_frontier", run_frontier), ("allocate_replication", run_replication),
                             ("stage_ns", run_stage))}


def e2e(pure: bool) -> float:
    env = dict(os.environ, COMPASS_PURE_PYTHON="1" if pure else "0")
    stmt = f"import time; t = time.perf_counter(); {E2E}; print(time.perf_counter() - t)"
    out = subprocess.run([sys.executable, "-c", stmt], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--groups", type=int, default=20, help="random groups per benchmark pair")
    ap.add_argument("--e2e", action="store_true", help="also time a short GA run per backend")
    args = ap.parse_args(argv)

    frontier, replication = capture_inputs(args.groups)
    impls = kernels.backends()
    print(f"captured {len(frontier)} frontier calls, {len(replication)} replication calls")
    if "cython" not in impls:
        print("compiled extension not built; run `python setup.py build_ext --inplace` first")
    results = {name: bench(impl, frontier, replication, args.repeat) for name, impl in impls.items()}
    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in results) + ("     speedup" if len(results) > 1 else ""))
    for kernel in results["python"]:
        row = f"{kernel:<22}" + "".join(f"{r[kernel] * 1e3:>10.2f}ms" for r in results.values())
        if "cython" in results:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>11.1f}x"
        print(row)
    if args.e2e:
        py = e2e(True)
        line = f"{'GA vgg16-S, 5 gens':<22}{py * 1e3:>10.0f}ms"
        if "cython" in impls:
            cy = e2e(False)
            line = f"{'GA vgg16-S, 5 gens':<22}{py * 1e3:>10.0f}ms{cy * 1e3:>10.0f}ms{py / cy:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
