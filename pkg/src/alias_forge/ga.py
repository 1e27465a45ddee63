"""Genetic search over obfuscation genomes under a latency budget."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import GraphError, ModelGraph, infer_shapes
from .metrics import FitnessReport, fitness, stdev_per_feature
from .trace import TraceParams, total_latency, trace
from .transforms import (
    DEEPEN_KERNELS, Genome, Op, Slot, TransformError, apply_genome, eligible_layers,
    random_genome,
)

log = logging.getLogger(__name__)

GA_STREAM = 0x6A
NOISE_STREAM = 0x4E
LOG_HEADER = ("generation", "candidate", "stdev_sum", "latency", "scaling", "fitness")


@dataclass(frozen=True)
class GAConfig:
    population_size: int = 16
    generations: int = 20
    budget: float = 0.2
    mutation_sigma: float = 0.5
    seed: int = 0
    fitness_mode: str = "verbatim"
    # probability that a gene receives noise at all; 1.0 perturbs every gene
    mutation_rate: float = 1.0
    elitism_fraction: float = 0.5

    def __post_init__(self):
        if self.population_size < 4 or self.population_size % 2:
            raise ValueError(f"population_size must be even and >= 4, got {self.population_size}")
        if self.generations < 1:
            raise ValueError(f"generations must be >= 1, got {self.generations}")
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")
        if self.mutation_sigma < 0:
            raise ValueError(f"mutation_sigma must be >= 0, got {self.mutation_sigma}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate must lie in [0, 1], got {self.mutation_rate}")
        if self.elitism_fraction != 0.5:
            raise ValueError("elitism_fraction is fixed at 0.5")


@dataclass(frozen=True)
class Candidate:
    genome: Genome
    fitness_report: FitnessReport
    feasible: bool

    @property
    def fitness(self) -> float:
        return self.fitness_report.fitness

    @property
    def latency(self) -> float:
        return self.fitness_report.latency

    def rank_key(self) -> tuple:
        return (not self.feasible, self.fitness, self.latency)


@dataclass
class RunLog:
    rows: list[tuple] = field(default_factory=list)
    # best-ever candidate after each generation
    best_per_generation: list[Candidate] = field(default_factory=list)
    baseline_latency: float = 0.0
    baseline_stdev_sum: float = 0.0

    @property
    def best_fitness(self) -> list[float]:
        return [c.fitness for c in self.best_per_generation]

    def to_csv(self) -> str:
        lines = [",".join(LOG_HEADER)]
        for row in self.rows:
            lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
        return "\n".join(lines) + "\n"


class NoEligibleLayersError(GraphError):
    pass


def crossover(a: Genome, b: Genome, point: int) -> tuple[Genome, Genome]:
    """One-point crossover of slot lists."""
    if a.base_hash != b.base_hash or len(a) != len(b):
        raise ValueError("genomes come from different base models")
    if not 1 <= point < len(a):
        raise ValueError(f"crossover point {point} outside [1, {len(a)})")
    s1 = a.slots[:point] + b.slots[point:]
    s2 = b.slots[:point] + a.slots[point:]
    return Genome(a.base_hash, s1, a.base_name), Genome(a.base_hash, s2, a.base_name)


def _mutate_slot(slot: Slot, sigma: float, rng: np.random.Generator, rate: float) -> Slot:
    active = set()
    params = {}
    for op in slot.applicable:
        hit = rng.random(1 + len(slot.bounds.get(op, {}))) < rate
        noise = rng.normal(0.0, sigma, hit.size) * hit
        level = (1.0 if op in slot.active else 0.0) + noise[0]
        if level > 0.5:
            active.add(op)
        p = dict(slot.params.get(op, {}))
        for idx, (name, (lo, hi)) in enumerate(slot.bounds.get(op, {}).items(), start=1):
            if op is Op.DEEPEN:
                step = 2 * int(round(noise[idx]))
            else:
                step = int(round(noise[idx] * max(1.0, (hi - lo) / 4)))
            value = min(hi, max(lo, p.get(name, lo) + step))
            if op is Op.DEEPEN and value not in DEEPEN_KERNELS:
                value = min(DEEPEN_KERNELS, key=lambda k: (abs(k - value), k))
            p[name] = value
        params[op] = p
    return slot.with_ops(active, params)


def gene_count(g: Genome) -> int:
    return sum(len(s.applicable) + sum(len(b) for b in s.bounds.values()) for s in g.slots)


def mutate(g: Genome, sigma: float, rng: np.random.Generator, rate: float = 1.0) -> Genome:
    """Gaussian mutation.

    Each op bit is an activation in {0, 1}; a gene picked with probability
    ``rate`` gets N(0, sigma) added and the bit is kept when the result exceeds
    0.5. Split points and kernel sizes take rounded Gaussian steps and are
    clamped to their valid range.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    if sigma == 0 or rate == 0:
        return g
    return Genome(g.base_hash, tuple(_mutate_slot(s, sigma, rng, rate) for s in g.slots), g.base_name)


class Evaluator:
    """Traces genomes applied to one base model and scores them; caches noise-free results."""

    def __init__(self, base: ModelGraph, budget: float, trace_params: TraceParams | None = None,
                 fitness_mode: str = "verbatim", seed: int = 0):
        self.base = infer_shapes(base.strip_weights())
        self.budget = budget
        self.params = trace_params or TraceParams()
        self.mode = fitness_mode
        self.seed = seed
        base_tm = trace(self.base, self.params, self._noise_rng(-1, -1))
        self.baseline_tm = base_tm
        self.baseline_latency = total_latency(base_tm, self.params.bandwidth)
        self._cache: dict[tuple, Candidate] = {}

    def _noise_rng(self, generation: int, index: int) -> np.random.Generator | None:
        if self.params.noise_sigma <= 0:
            return None
        return np.random.default_rng([self.seed, NOISE_STREAM, generation + 1, index + 1])

    def __call__(self, genome: Genome, generation: int = 0, index: int = 0) -> Candidate:
        cacheable = self.params.noise_sigma <= 0
        key = genome.key()
        if cacheable and key in self._cache:
            hit = self._cache[key]
            return Candidate(genome, hit.fitness_report, hit.feasible)
        tm = trace(apply_genome(self.base, genome), self.params, self._noise_rng(generation, index))
        rep = fitness(tm, self.baseline_latency, self.budget, self.mode, self.params.bandwidth)
        cand = Candidate(genome, rep, rep.feasible)
        if cacheable:
            self._cache[key] = cand
        return cand


def evolve(base: ModelGraph, cfg: GAConfig, trace_params: TraceParams | None = None,
           progress: Callable[[int, Candidate], None] | None = None,
           initial: list[Genome] | None = None) -> tuple[Candidate, RunLog]:
    """Run the elitist GA and return the best feasible candidate ever seen.

    Each generation is scored, ranked (feasible first, then fitness, latency,
    index), the top half survives, and the other half is bred from adjacent
    survivor pairs by one-point crossover plus Gaussian mutation.
    """
    base = infer_shapes(base)
    if not eligible_layers(base):
        raise NoEligibleLayersError(f"model {base.name!r} has no Conv2D or FullyConnected layers")
    evaluate = Evaluator(base, cfg.budget, trace_params, cfg.fitness_mode, cfg.seed)
    rng = np.random.default_rng([cfg.seed, GA_STREAM])
    if initial is not None:
        if len(initial) != cfg.population_size:
            raise ValueError(f"initial population has {len(initial)} genomes, expected {cfg.population_size}")
        population = list(initial)
    else:
        population = [random_genome(evaluate.base, rng) for _ in range(cfg.population_size)]

    run = RunLog(baseline_latency=evaluate.baseline_latency)
    if len(evaluate.baseline_tm) >= 2:
        run.baseline_stdev_sum = sum(stdev_per_feature(evaluate.baseline_tm))
    best: Candidate | None = None
    best_feasible: Candidate | None = None
    n_parents = cfg.population_size // 2
    n_slots = len(population[0])

    for gen in range(cfg.generations):
        cands = [evaluate(g, gen, i) for i, g in enumerate(population)]
        order = sorted(range(len(cands)), key=lambda i: cands[i].rank_key() + (i,))
        for i, c in enumerate(cands):
            r = c.fitness_report
            run.rows.append((gen, i, r.stdev_sum, r.latency, r.scaling, r.fitness))
        top = cands[order[0]]
        if best is None or top.rank_key() < best.rank_key():
            best = top
        if top.feasible and (best_feasible is None or top.rank_key() < best_feasible.rank_key()):
            best_feasible = top
        run.best_per_generation.append(best)
        if progress is not None:
            progress(gen, best)
        if gen == cfg.generations - 1:
            break
        parents = [cands[i].genome for i in order[:n_parents]]
        offspring = []
        for p in range(0, n_parents, 2):
            a = parents[p]
            b = parents[p + 1] if p + 1 < n_parents else parents[0]
            if n_slots > 1:
                c1, c2 = crossover(a, b, int(rng.integers(1, n_slots)))
            else:
                c1, c2 = a, b
            offspring.append(mutate(c1, cfg.mutation_sigma, rng, cfg.mutation_rate))
            offspring.append(mutate(c2, cfg.mutation_sigma, rng, cfg.mutation_rate))
        population = parents + offspring[:cfg.population_size - n_parents]

    if best_feasible is None:
        log.warning("no candidate met the latency budget B=%g; returning the best infeasible one",
                    cfg.budget)
        return best, run
    return best_feasible, run
