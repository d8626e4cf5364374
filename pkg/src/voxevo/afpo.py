"""Age-Fitness Pareto Optimisation, mutation only.

Two objectives: maximize aptitude, minimize genotypic age. Each generation
every survivor ages by one, the population breeds ``P - 1`` mutants (which
inherit their parent's age) plus one random newcomer of age 1, and only the
non-dominated individuals of parents and offspring are kept. A front larger
than ``P`` is truncated by (aptitude desc, age asc); a smaller one is topped
up with mutants of random survivors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from voxevo.cppn import CppnConfig, CppnGenome, random_genome
from voxevo.neat import InnovationLedger, NeatConfig, mutate

Evaluate = Callable[[Sequence[CppnGenome]], Sequence[float]]


@dataclass(frozen=True)
class AgedGenome:
    genome: CppnGenome
    age: int = 1
    aptitude: float | None = None
    uid: int = 0

    def __post_init__(self):
        if self.age < 1:
            raise ValueError("age starts at 1")


def dominates(a: AgedGenome, b: AgedGenome) -> bool:
    """True if ``a`` is at least as fit and as young as ``b`` and strictly better in one."""
    if a.aptitude is None or b.aptitude is None:
        raise ValueError("dominance needs evaluated individuals")
    return (
        a.aptitude >= b.aptitude
        and a.age <= b.age
        and (a.aptitude > b.aptitude or a.age < b.age)
    )


def pareto_front(population: Sequence[AgedGenome]) -> list[AgedGenome]:
    """Individuals not dominated by any other, in their original order.

    Sorting by (aptitude desc, age asc) and sweeping keeps this O(n log n):
    an individual is dominated iff some earlier one in that order is at
    least as young and differs from it in at least one objective.
    """
    order = sorted(range(len(population)), key=lambda i: (-population[i].aptitude, population[i].age))
    keep = set()
    best_age = math.inf  # youngest age among strictly fitter individuals
    group_start = 0
    while group_start < len(order):
        apt = population[order[group_start]].aptitude
        group_end = group_start
        while group_end < len(order) and population[order[group_end]].aptitude == apt:
            group_end += 1
        group = order[group_start:group_end]
        youngest = min(population[i].age for i in group)
        for i in group:
            age = population[i].age
            if age < best_age and age == youngest:
                keep.add(i)
        best_age = min(best_age, youngest)
        group_start = group_end
    return [population[i] for i in sorted(keep)]


@dataclass(frozen=True)
class AfpoConfig:
    population_size: int = 100
    cppn: CppnConfig = field(default_factory=CppnConfig)
    # only the mutation rates are used
    mutation: NeatConfig = field(default_factory=NeatConfig)

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population size must be at least 2")


def _evaluated(individuals: list[AgedGenome], evaluate: Evaluate) -> list[AgedGenome]:
    todo = [i for i, ind in enumerate(individuals) if ind.aptitude is None]
    if not todo:
        return individuals
    scores = evaluate([individuals[i].genome for i in todo])
    out = list(individuals)
    for i, s in zip(todo, scores):
        out[i] = replace(out[i], aptitude=float(s))
    return out


class StepResult(NamedTuple):
    population: list[AgedGenome]
    newcomer: AgedGenome
    pool: list[AgedGenome]  # aged parents and evaluated offspring
    front: list[AgedGenome]  # non-dominated members of ``pool``


def afpo_step(
    population: Sequence[AgedGenome],
    cfg: AfpoConfig,
    rng: np.random.Generator,
    evaluate: Evaluate,
    ledger: InnovationLedger,
    uids: Callable[[], int],
    init_rng: np.random.Generator | None = None,
) -> StepResult:
    """One AFPO generation.

    Args:
        population: the current, evaluated population.
        evaluate: scores a batch of genomes; only unevaluated individuals are sent.
        ledger: innovation bookkeeping for structural mutations.
        uids: returns a fresh individual id on every call.
        init_rng: stream for the newcomer genome (defaults to ``rng``).

    Returns:
        The next population and the injected newcomer, plus the selection
        pool and its Pareto front for inspection.
    """
    init_rng = rng if init_rng is None else init_rng
    size = cfg.population_size
    ledger.new_generation()
    parents = [replace(p, age=p.age + 1) for p in _evaluated(list(population), evaluate)]

    offspring = []
    for _ in range(size - 1):
        p = parents[int(rng.integers(len(parents)))]
        offspring.append(AgedGenome(mutate(p.genome, cfg.mutation, ledger, rng), p.age, None, uids()))
    newcomer = AgedGenome(random_genome(cfg.cppn, init_rng), 1, None, uids())
    offspring.append(newcomer)
    offspring = _evaluated(offspring, evaluate)
    newcomer = offspring[-1]

    pool = parents + offspring
    front = pareto_front(pool)
    survivors = front
    if len(survivors) > size:
        survivors = sorted(survivors, key=lambda a: (-a.aptitude, a.age, a.uid))[:size]
    refill = []
    while len(survivors) + len(refill) < size:
        p = survivors[int(rng.integers(len(survivors)))]
        refill.append(AgedGenome(mutate(p.genome, cfg.mutation, ledger, rng), p.age, None, uids()))
    return StepResult(survivors + _evaluated(refill, evaluate), newcomer, pool, front)


class Afpo:
    """Stateful AFPO run driven by an evaluation callback."""

    def __init__(self, cfg: AfpoConfig, rng: np.random.Generator, init_rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng
        self.init_rng = rng if init_rng is None else init_rng
        self.ledger = InnovationLedger.for_config(cfg.cppn)
        self._next_uid = 0
        self.population = [
            AgedGenome(random_genome(cfg.cppn, self.init_rng), 1, None, self.next_uid())
            for _ in range(cfg.population_size)
        ]
        self.generation = 0
        self.newcomers: list[int] = []
        self.last_step: StepResult | None = None

    def next_uid(self) -> int:
        uid = self._next_uid
        self._next_uid += 1
        return uid

    def start(self, evaluate: Evaluate) -> list[AgedGenome]:
        self.population = _evaluated(self.population, evaluate)
        return self.population

    def step(self, evaluate: Evaluate) -> list[AgedGenome]:
        self.last_step = afpo_step(
            self.population, self.cfg, self.rng, evaluate, self.ledger, self.next_uid, self.init_rng
        )
        self.population = self.last_step.population
        self.newcomers.append(self.last_step.newcomer.uid)
        self.generation += 1
        return self.population

    def best(self) -> AgedGenome:
        return max(self.population, key=lambda a: (a.aptitude, -a.age))
