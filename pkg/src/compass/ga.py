"""Genetic search over partition groups.

A chromosome is the list of cut points of a partition group. Each generation
keeps the ``n_sel`` fittest groups and refills the population with mutated
copies of them; the partition chosen for mutation is the one performing
worst relative to how the rest of the population partitions the same units.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cost_model
from .decomposer import DecomposedModel, ValidityMap
from .errors import DegenerateExpectation
from .hw_model import ChipSpec
from .partitioner import DEFAULT_ACT_BITS, PartitionFactory, random_boundaries

log = logging.getLogger(__name__)

SCHEMES = ("merge", "split", "move", "fixed_random")
_TAG_INIT, _TAG_SELECT, _TAG_MUTATE = 0, 1, 2
_TIE = 1e-9


@dataclass(frozen=True)
class GaParams:
    generations: int = 30
    population: int = 100
    n_sel: int = 20
    n_mut: int = 80
    mutation_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    early_stop_patience: int = 5
    early_stop_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.n_sel < 1:
            raise ValueError("n_sel must be >= 1")
        if self.n_sel + self.n_mut != self.population:
            raise ValueError(f"n_sel + n_mut must equal population ({self.n_sel}+{self.n_mut}!={self.population})")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if len(self.mutation_weights) != 4 or any(w < 0 for w in self.mutation_weights):
            raise ValueError("mutation_weights needs four non-negative probabilities")
        if not math.isclose(sum(self.mutation_weights), 1.0, rel_tol=1e-9):
            raise ValueError("mutation_weights must sum to 1")

    @classmethod
    def scaled(cls, population: int, generations: int, seed: int = 0, **kw) -> "GaParams":
        """Keep the default 1:4 survivor/mutant ratio at another population size."""
        n_sel = max(1, population // 5)
        return cls(generations=generations, population=population, n_sel=n_sel,
                   n_mut=population - n_sel, seed=seed, **kw)


@dataclass(frozen=True, eq=False)
class Individual:
    cuts: tuple  # boundary positions, 0 ... M
    fitness: tuple  # f(P) per partition
    counter: int  # creation order, breaks PGF ties
    origin: str = "initial"

    @property
    def pgf(self) -> float:
        return math.fsum(self.fitness)

    @property
    def spans(self):
        return list(zip(self.cuts, self.cuts[1:]))

    def __len__(self):
        return len(self.fitness)


class Evaluator:
    """Partition fitness, memoized by span; optional process pool for new spans."""

    def __init__(self, model: DecomposedModel, chip: ChipSpec, batch: int, objective="latency",
                 overlap_writes=False, act_bits=DEFAULT_ACT_BITS, workers=1, factory=None):
        if objective not in cost_model.OBJECTIVES:
            raise ValueError(f"unknown objective {objective!r}")
        self.model = model
        self.chip = chip
        self.batch = batch
        self.objective = objective
        self.overlap_writes = overlap_writes
        self.factory = factory or PartitionFactory(model, chip, act_bits)
        self.workers = max(1, int(workers))
        self._bases: dict = {}
        self._pool = None

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def prefetch(self, spans) -> None:
        todo = sorted({s for s in spans if s not in self._bases})
        if not todo:
            return
        if self.workers > 1 and len(todo) > 1:
            if self._pool is None:
                self._pool = ProcessPoolExecutor(
                    self.workers, initializer=_worker_init,
                    initargs=(self.model, self.chip, self.factory.act_bits),
                )
            chunk = max(1, len(todo) // (4 * self.workers))
            for span, base in zip(todo, self._pool.map(_worker_base, todo, chunksize=chunk)):
                self._bases[span] = base
        else:
            for span in todo:
                self._bases[span] = cost_model.partition_base(self.factory.partition(*span), self.chip)

    def costs(self, cuts) -> list:
        spans = list(zip(cuts, cuts[1:]))
        self.prefetch(spans)
        bases = [self._bases[s] for s in spans]
        out = [cost_model.cost_from_base(b, self.chip, self.batch, self.objective, index=k, span=s)
               for k, (b, s) in enumerate(zip(bases, spans))]
        if self.overlap_writes:
            ws = cost_model.overlapped_writes(out)
            out = [cost_model.cost_from_base(b, self.chip, self.batch, self.objective, index=k, span=s,
                                             write_latency=w)
                   for k, (b, s, w) in enumerate(zip(bases, spans, ws))]
        return out

    def fitness(self, cuts) -> tuple:
        return tuple(c.fitness for c in self.costs(cuts))

    def pgf(self, cuts) -> float:
        return math.fsum(self.fitness(cuts))

    def group(self, cuts):
        return self.factory.group(cuts)

    def report(self, cuts, scheme=""):
        group = self.group(cuts)
        bases = [self._bases.get(p.span) for p in group.partitions]
        if any(b is None for b in bases):
            bases = None
        return cost_model.group_cost(group, self.chip, self.batch, self.objective, self.overlap_writes,
                                     scheme=scheme, bases=bases)

    @property
    def spans_evaluated(self) -> int:
        return len(self._bases)


_WORKER_FACTORY = None


def _worker_init(model, chip, act_bits):
    global _WORKER_FACTORY
    _WORKER_FACTORY = PartitionFactory(model, chip, act_bits)


def _worker_base(span):
    return cost_model.partition_base(_WORKER_FACTORY.partition(*span), _WORKER_FACTORY.chip)


# -- partition scores ---------------------------------------------------------------


class ScoreTable:
    """Unit fitness m(x), population expectation F[p, q] and partition scores R.

    m(x_i) = f(P) / |P| for the partition P holding unit i in one individual;
    F[p, q] is the population mean of sum(m(x_i), p <= i < q);
    R(P) = f(P) / F[a, b] for P = [a, b).
    """

    def __init__(self, population, M: int):
        self.M = M
        prefixes = np.empty((len(population), M + 1))
        for row, ind in zip(prefixes, population):
            row[:] = _prefix(ind, M)
        self._prefixes = prefixes
        self.mean_prefix = prefixes.mean(axis=0)

    def m(self, ind: Individual) -> np.ndarray:
        out = np.empty(self.M)
        for (a, b), f in zip(ind.spans, ind.fitness):
            out[a:b] = f / (b - a)
        return out

    def expected(self, p: int, q: int) -> float:
        val = float(self.mean_prefix[q] - self.mean_prefix[p])
        if not val > 0:
            raise DegenerateExpectation(f"expected fitness over [{p}, {q}) is {val}")
        return val

    def scores(self, ind: Individual) -> list:
        return [f / self.expected(a, b) for (a, b), f in zip(ind.spans, ind.fitness)]

    def pair_scores(self, ind: Individual) -> list:
        cuts = ind.cuts
        return [
            (ind.fitness[k] + ind.fitness[k + 1]) / self.expected(cuts[k], cuts[k + 2])
            for k in range(len(ind) - 1)
        ]


def _prefix(ind: Individual, M: int) -> np.ndarray:
    m = np.empty(M)
    for (a, b), f in zip(ind.spans, ind.fitness):
        m[a:b] = f / (b - a)
    out = np.zeros(M + 1)
    np.cumsum(m, out=out[1:])
    return out


def partition_score(individual: Individual, population) -> ScoreTable:
    M = individual.cuts[-1]
    return ScoreTable(population, M)


def _argmax_last(values) -> int:
    """Index of the largest value; near-ties resolve to the highest index."""
    top = max(values)
    return max(i for i, v in enumerate(values) if v >= top * (1 - _TIE))


def _argmin_first(values) -> int:
    low = min(values)
    return min(i for i, v in enumerate(values) if v <= low * (1 + _TIE))


# -- mutation -------------------------------------------------------------------


def _merge(cuts, ind, table, vmap, rng):
    if len(cuts) < 3:
        return None
    pair = table.pair_scores(ind)
    options = [k for k in range(len(pair)) if vmap.is_valid(cuts[k], cuts[k + 2])]
    if not options:
        return None
    k = _argmax_last([pair[k] for k in options])
    k = options[k]
    return cuts[:k + 1] + cuts[k + 2:]


def _split(cuts, worst, vmap, rng):
    a, b = cuts[worst], cuts[worst + 1]
    points = [p for p in vmap.valid_ends(a) if p < b and vmap.is_valid(p, b)]
    if not points:
        return None
    p = points[int(rng.integers(len(points)))]
    return cuts[:worst + 1] + [p] + cuts[worst + 1:]


def _move(cuts, worst, vmap, rng):
    bounds = vmap.boundaries
    pos = {b: i for i, b in enumerate(bounds)}
    options = []
    for c in (worst, worst + 1):  # left and right boundary of the worst partition
        if c == 0 or c == len(cuts) - 1:
            continue
        here = pos[cuts[c]]
        for new in (bounds[here - 1], bounds[here + 1] if here + 1 < len(bounds) else None):
            if new is None or not cuts[c - 1] < new < cuts[c + 1]:
                continue
            if vmap.is_valid(cuts[c - 1], new) and vmap.is_valid(new, cuts[c + 1]):
                options.append((c, new))
    if not options:
        return None
    c, new = options[int(rng.integers(len(options)))]
    out = list(cuts)
    out[c] = new
    return out


def _fixed_random(cuts, best, vmap, rng):
    a, b = cuts[best], cuts[best + 1]
    left = random_boundaries(vmap, rng, 0, a) if a > 0 else [0]
    right = random_boundaries(vmap, rng, b, vmap.M)
    return left + right


def mutate(ind: Individual, table: ScoreTable, vmap: ValidityMap, rng: np.random.Generator,
           weights=(0.25, 0.25, 0.25, 0.25)):
    """Apply one mutation scheme; returns (new cuts, scheme name).

    The scheme is drawn by ``weights``; an infeasible scheme is dropped and
    another drawn. When all four fail the cuts come back unchanged with
    scheme ``None``.
    """
    cuts = list(ind.cuts)
    R = table.scores(ind)
    worst = _argmax_last(R)
    best = _argmin_first(R)
    remaining = list(range(4))
    w = np.asarray(weights, dtype=float)
    while remaining:
        p = w[remaining]
        if p.sum() <= 0:
            p = np.ones(len(remaining))
        choice = remaining[int(rng.choice(len(remaining), p=p / p.sum()))]
        name = SCHEMES[choice]
        if name == "merge":
            out = _merge(cuts, ind, table, vmap, rng)
        elif name == "split":
            out = _split(cuts, worst, vmap, rng)
        elif name == "move":
            out = _move(cuts, worst, vmap, rng)
        else:
            out = _fixed_random(cuts, best, vmap, rng)
        if out is not None:
            return out, name
        remaining.remove(choice)
    log.debug("no feasible mutation for %s", ind.cuts)
    return cuts, None


# -- driver -----------------------------------------------------------------------


@dataclass
class GaResult:
    best: Individual
    group: object  # PartitionGroup
    history: list  # best PGF per evaluated generation
    log: list = field(default_factory=list)  # convergence records
    generations_run: int = 0
    stopped_early: bool = False
    spans_evaluated: int = 0

    def log_csv(self) -> str:
        lines = ["generation,slot,pgf,partition_count,origin,selected"]
        for r in self.log:
            lines.append(f"{r['generation']},{r['slot']},{r['pgf']!r},{r['partition_count']},"
                         f"{r['origin']},{int(r['selected'])}")
        return "\n".join(lines) + "\n"


def _rng(seed, tag, generation, slot=0):
    return np.random.default_rng([seed, tag, generation, slot])


class CompassGA:
    def __init__(self, model: DecomposedModel, chip: ChipSpec, vmap: ValidityMap, params: GaParams,
                 objective="latency", batch=16, overlap_writes=False, workers=1, evaluator=None,
                 act_bits=DEFAULT_ACT_BITS):
        self.model = model
        self.chip = chip
        self.vmap = vmap
        self.params = params
        self.evaluator = evaluator or Evaluator(model, chip, batch, objective, overlap_writes, act_bits, workers)
        self._counter = 0

    def _new(self, cuts, origin) -> Individual:
        ind = Individual(tuple(cuts), (), self._counter, origin)
        self._counter += 1
        return ind

    def _evaluate(self, pending: list) -> list:
        spans = [s for ind in pending for s in zip(ind.cuts, ind.cuts[1:])]
        self.evaluator.prefetch(spans)
        return [Individual(ind.cuts, self.evaluator.fitness(ind.cuts), ind.counter, ind.origin) for ind in pending]

    def initial_population(self) -> list:
        p = self.params
        return [self._new(random_boundaries(self.vmap, _rng(p.seed, _TAG_INIT, 0, slot)), "initial")
                for slot in range(p.population)]

    def run(self) -> GaResult:
        p = self.params
        M = self.model.M
        population = self._evaluate(self.initial_population())
        history, records = [], []
        stopped = False
        g = 0
        for g in range(p.generations):
            population.sort(key=lambda ind: (ind.pgf, ind.counter))
            history.append(population[0].pgf)
            self._record(records, g, population)
            if self._converged(history):
                stopped = True
                break
            survivors = population[:p.n_sel]
            pick = _rng(p.seed, _TAG_SELECT, g).integers(p.n_sel, size=p.n_mut)
            table = ScoreTable(population, M)
            mutants = []
            for slot, parent_idx in enumerate(pick):
                parent = survivors[int(parent_idx)]
                cuts, _scheme = mutate(parent, table, self.vmap, _rng(p.seed, _TAG_MUTATE, g, slot),
                                       p.mutation_weights)
                mutants.append(self._new(cuts, "mutant"))
            population = [Individual(s.cuts, s.fitness, s.counter, "survivor") for s in survivors]
            population += self._evaluate(mutants)
        else:
            g = p.generations
        population.sort(key=lambda ind: (ind.pgf, ind.counter))
        if not stopped:
            history.append(population[0].pgf)
            self._record(records, g, population)
        best = population[0]
        return GaResult(
            best=best,
            group=self.evaluator.group(best.cuts),
            history=history,
            log=records,
            generations_run=g,
            stopped_early=stopped,
            spans_evaluated=self.evaluator.spans_evaluated,
        )

    def _converged(self, history) -> bool:
        k = self.params.early_stop_patience
        if k <= 0 or len(history) <= k:
            return False
        old, new = history[-k - 1], history[-1]
        return (old - new) <= self.params.early_stop_tol * abs(old)

    def _record(self, records, generation, population):
        for slot, ind in enumerate(population):
            records.append({
                "generation": generation,
                "slot": slot,
                "pgf": ind.pgf,
                "partition_count": len(ind),
                "origin": ind.origin,
                "selected": slot < self.params.n_sel,
            })


def run_compass(model, chip, vmap, params: GaParams, objective="latency", B=16, **kw):
    """Best partition group found by the genetic search."""
    return run_compass_detailed(model, chip, vmap, params, objective, B, **kw).group


def run_compass_detailed(model, chip, vmap, params: GaParams, objective="latency", B=16, **kw) -> GaResult:
    ga = CompassGA(model, chip, vmap, params, objective, B, **kw)
    try:
        return ga.run()
    finally:
        ga.evaluator.close()
