"""NEAT over CPPN genomes.

Historical markings, speciation by compatibility distance, explicit fitness
sharing, structural/weight mutation, crossover and stagnation-aware
reproduction. The engine is evaluation-agnostic: callers score
``Neat.population`` and hand the fitness vector to :meth:`Neat.tell`.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from voxevo.cppn import (
    ConnectionGene,
    CppnConfig,
    CppnGenome,
    NodeGene,
    NodeRole,
    creates_cycle,
    random_genome,
)


@dataclass(frozen=True)
class NeatConfig:
    population_size: int = 100
    generations: int = 3000
    compatibility_threshold: float = 3.0
    excess_coefficient: float = 1.0
    disjoint_coefficient: float = 1.0
    weight_coefficient: float = 0.5
    # N is forced to 1 when both genomes have fewer genes than this; 0 disables
    small_genome_threshold: int = 0
    max_stagnation: int = 25
    survival_threshold: float = 0.6
    activation_mutate_rate: float = 0.4
    add_connection_rate: float = 0.3
    delete_connection_rate: float = 0.2
    toggle_connection_rate: float = 0.5
    add_node_rate: float = 0.3
    delete_node_rate: float = 0.2
    weight_perturb_rate: float = 0.8
    weight_perturb_sigma: float = 0.5
    weight_replace_rate: float = 0.1
    disabled_gene_inherit_rate: float = 0.75
    elitism_min_species_size: int = 5
    max_mutation_attempts: int = 5
    cppn: CppnConfig = field(default_factory=CppnConfig)

    def __post_init__(self):
        rates = [
            self.survival_threshold,
            self.activation_mutate_rate,
            self.add_connection_rate,
            self.delete_connection_rate,
            self.toggle_connection_rate,
            self.add_node_rate,
            self.delete_node_rate,
            self.weight_perturb_rate,
            self.weight_replace_rate,
            self.disabled_gene_inherit_rate,
        ]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("all rates must lie in [0, 1]")
        if self.weight_perturb_rate + self.weight_replace_rate > 1.0:
            raise ValueError("weight perturb and replace rates must sum to at most 1")
        if self.compatibility_threshold <= 0:
            raise ValueError("compatibility threshold must be positive")
        if self.population_size < 2:
            raise ValueError("population size must be at least 2")


# ---------------------------------------------------------------------------
# innovation bookkeeping


@dataclass
class InnovationLedger:
    """Hands out innovation numbers and hidden-node ids.

    Identical structural changes made within one generation get identical
    numbers; :meth:`new_generation` forgets them.
    """

    next_innovation: int
    next_node_id: int
    cache: dict = field(default_factory=dict)

    @classmethod
    def for_config(cls, cfg: CppnConfig) -> InnovationLedger:
        return cls(cfg.initial_innovations + 1, cfg.total_inputs + cfg.n_outputs)

    def new_generation(self) -> None:
        self.cache.clear()

    def take_innovation(self) -> int:
        n = self.next_innovation
        self.next_innovation += 1
        return n

    def connection(self, source: int, target: int) -> int:
        key = ("conn", source, target)
        if key not in self.cache:
            self.cache[key] = self.take_innovation()
        return self.cache[key]

    def split(self, innovation: int) -> tuple[int, int, int]:
        """(new node id, innovation of in-link, innovation of out-link)."""
        key = ("split", innovation)
        if key not in self.cache:
            self.cache[key] = self.fresh_split()
        return self.cache[key]

    def fresh_split(self) -> tuple[int, int, int]:
        node = self.next_node_id
        self.next_node_id += 1
        return node, self.take_innovation(), self.take_innovation()


# ---------------------------------------------------------------------------
# distance and speciation


def compatibility_distance(g1: CppnGenome, g2: CppnGenome, cfg: NeatConfig) -> float:
    """c1*E/N + c2*D/N + c3*mean|dw| over connection genes aligned by innovation."""
    a = {c.innovation: c.weight for c in g1.connections}
    b = {c.innovation: c.weight for c in g2.connections}
    if not a and not b:
        return 0.0
    max_a = max(a, default=0)
    max_b = max(b, default=0)
    cutoff = min(max_a, max_b)
    excess = disjoint = 0
    for innov in a.keys() ^ b.keys():
        if innov > cutoff:
            excess += 1
        else:
            disjoint += 1
    matching = a.keys() & b.keys()
    wbar = sum(abs(a[i] - b[i]) for i in matching) / len(matching) if matching else 0.0
    n = max(len(a), len(b))
    if len(a) < cfg.small_genome_threshold and len(b) < cfg.small_genome_threshold:
        n = 1
    return (
        cfg.excess_coefficient * excess / n
        + cfg.disjoint_coefficient * disjoint / n
        + cfg.weight_coefficient * wbar
    )


@dataclass
class SpeciesRecord:
    species_id: int
    representative: CppnGenome
    members: list[int] = field(default_factory=list)
    best_fitness_ever: float = -math.inf
    stagnation: int = 0


def speciate(
    population: Sequence[CppnGenome],
    previous: Sequence[SpeciesRecord],
    cfg: NeatConfig,
    next_species_id: int | None = None,
) -> list[SpeciesRecord]:
    """Assign each genome to the first compatible species.

    Species are tried in id order; a genome that fits none founds a new
    species and becomes its representative. Species left without members
    are dropped. The returned records are fresh copies.
    """
    species = [
        SpeciesRecord(s.species_id, s.representative, [], s.best_fitness_ever, s.stagnation)
        for s in sorted(previous, key=lambda s: s.species_id)
    ]
    if next_species_id is None:
        next_species_id = max((s.species_id for s in species), default=0) + 1
    for idx, genome in enumerate(population):
        for s in species:
            if compatibility_distance(genome, s.representative, cfg) < cfg.compatibility_threshold:
                s.members.append(idx)
                break
        else:
            species.append(SpeciesRecord(next_species_id, genome, [idx]))
            next_species_id += 1
    return [s for s in species if s.members]


def shared_fitness_allotment(
    species: Sequence[SpeciesRecord], fitnesses: Sequence[float], population_size: int
) -> list[int]:
    """Offspring per species under explicit fitness sharing.

    Each member's fitness is divided by its species size; species receive
    offspring in proportion to their summed adjusted fitness, rounded by
    largest remainder so the counts add up to ``population_size``. If every
    adjusted fitness is zero the split is uniform.
    """
    if not species:
        raise ValueError("no species to allot offspring to")
    f = np.asarray(fitnesses, dtype=float)
    shares = np.array([f[s.members].sum() / len(s.members) for s in species])
    if not np.all(np.isfinite(shares)) or np.any(shares < 0):
        raise ValueError("fitnesses must be finite and non-negative")
    total = shares.sum()
    if total <= 0:
        shares = np.ones(len(species))
        total = float(len(species))
    quota = shares * population_size / total
    counts = np.floor(quota).astype(int)
    remainder = population_size - int(counts.sum())
    order = sorted(range(len(species)), key=lambda i: -(quota[i] - counts[i]))
    for i in order[:remainder]:
        counts[i] += 1
    return [int(c) for c in counts]


# ---------------------------------------------------------------------------
# variation


def crossover(
    fitter: CppnGenome,
    other: CppnGenome,
    rng: np.random.Generator,
    disabled_inherit_rate: float = 0.75,
) -> CppnGenome:
    """Child with the fitter parent's structure.

    Matching genes take their weight from a uniformly chosen parent;
    disjoint and excess genes come from ``fitter``. A gene disabled in
    either parent stays disabled with probability ``disabled_inherit_rate``.
    """
    theirs = {c.innovation: c for c in other.connections}
    conns = []
    for c in fitter.connections:
        o = theirs.get(c.innovation)
        if o is None:
            conns.append(c)
            continue
        weight = c.weight if rng.random() < 0.5 else o.weight
        enabled = True
        if not (c.enabled and o.enabled):
            enabled = rng.random() >= disabled_inherit_rate
        conns.append(ConnectionGene(c.innovation, c.source, c.target, weight, enabled))
    other_nodes = other.node_map
    nodes = []
    for n in fitter.nodes:
        o = other_nodes.get(n.id)
        if n.role is not NodeRole.INPUT and o is not None and rng.random() >= 0.5:
            n = replace(n, activation=o.activation)
        nodes.append(n)
    return CppnGenome(tuple(nodes), tuple(conns), fitter.n_inputs, fitter.n_outputs)


def outputs_connected(genome: CppnGenome) -> bool:
    """True if at least one output is reachable from an input over enabled links."""
    succ: dict[int, list[int]] = {}
    for c in genome.connections:
        if c.enabled:
            succ.setdefault(c.source, []).append(c.target)
    stack = list(genome.input_ids)
    seen = set(stack)
    while stack:
        n = stack.pop()
        for t in succ.get(n, ()):
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return any(o in seen for o in genome.output_ids)


def _guarded(genome: CppnGenome, attempt, cfg: NeatConfig, rng) -> CppnGenome:
    """Run a destructive mutation, retrying if it cuts every output off."""
    was_connected = outputs_connected(genome)
    for _ in range(cfg.max_mutation_attempts):
        child = attempt(genome, rng)
        if child is None:
            return genome
        if not was_connected or outputs_connected(child):
            return child
    return genome


def _add_node(genome: CppnGenome, cfg: NeatConfig, ledger: InnovationLedger, rng) -> CppnGenome:
    enabled = [c for c in genome.connections if c.enabled]
    if not enabled:
        return genome
    old = enabled[int(rng.integers(len(enabled)))]
    node_id, in_innov, out_innov = ledger.split(old.innovation)
    existing = {c.innovation for c in genome.connections}
    if node_id in genome.node_map or in_innov in existing or out_innov in existing:
        node_id, in_innov, out_innov = ledger.fresh_split()
    acts = cfg.cppn.activations
    act = acts[int(rng.integers(len(acts)))]
    conns = [replace(c, enabled=False) if c.innovation == old.innovation else c for c in genome.connections]
    conns.append(ConnectionGene(in_innov, old.source, node_id, 1.0))
    conns.append(ConnectionGene(out_innov, node_id, old.target, old.weight))
    nodes = list(genome.nodes) + [NodeGene(node_id, NodeRole.HIDDEN, act)]
    return CppnGenome(tuple(nodes), tuple(conns), genome.n_inputs, genome.n_outputs)


def _delete_node(genome: CppnGenome, rng) -> CppnGenome | None:
    hidden = genome.hidden_ids
    if not hidden:
        return None
    victim = hidden[int(rng.integers(len(hidden)))]
    nodes = [n for n in genome.nodes if n.id != victim]
    conns = [c for c in genome.connections if victim not in (c.source, c.target)]
    return CppnGenome(tuple(nodes), tuple(conns), genome.n_inputs, genome.n_outputs)


def _add_connection(genome: CppnGenome, cfg: NeatConfig, ledger: InnovationLedger, rng) -> CppnGenome:
    present = {(c.source, c.target) for c in genome.connections}
    sources = list(genome.input_ids) + genome.hidden_ids
    targets = genome.hidden_ids + list(genome.output_ids)
    candidates = [
        (s, t)
        for s in sources
        for t in targets
        if (s, t) not in present and not creates_cycle(genome, s, t)
    ]
    if not candidates:
        return genome
    s, t = candidates[int(rng.integers(len(candidates)))]
    lo, hi = cfg.cppn.weight_init_range
    innov = ledger.connection(s, t)
    if any(c.innovation == innov for c in genome.connections):
        innov = ledger.take_innovation()
    conn = ConnectionGene(innov, s, t, float(rng.uniform(lo, hi)))
    return genome.with_connections(genome.connections + (conn,))


def _delete_connection(genome: CppnGenome, rng) -> CppnGenome | None:
    if not genome.connections:
        return None
    victim = genome.connections[int(rng.integers(len(genome.connections)))].innovation
    return genome.with_connections(c for c in genome.connections if c.innovation != victim)


def _toggle_connection(genome: CppnGenome, rng) -> CppnGenome | None:
    if not genome.connections:
        return None
    pick = genome.connections[int(rng.integers(len(genome.connections)))].innovation
    return genome.with_connections(
        replace(c, enabled=not c.enabled) if c.innovation == pick else c for c in genome.connections
    )


def _mutate_activation(genome: CppnGenome, cfg: NeatConfig, rng) -> CppnGenome:
    mutable = [n for n in genome.nodes if n.role is not NodeRole.INPUT]
    target = mutable[int(rng.integers(len(mutable)))].id
    acts = cfg.cppn.activations
    act = acts[int(rng.integers(len(acts)))]
    return genome.with_nodes(replace(n, activation=act) if n.id == target else n for n in genome.nodes)


def _mutate_weights(genome: CppnGenome, cfg: NeatConfig, rng) -> CppnGenome:
    if cfg.weight_perturb_rate == 0 and cfg.weight_replace_rate == 0:
        return genome
    n = len(genome.connections)
    u = rng.random(n)
    jitter = rng.normal(0.0, cfg.weight_perturb_sigma, n)
    lo, hi = cfg.cppn.weight_init_range
    fresh = rng.uniform(lo, hi, n)
    conns = []
    for i, c in enumerate(genome.connections):
        if u[i] < cfg.weight_replace_rate:
            c = replace(c, weight=float(fresh[i]))
        elif u[i] < cfg.weight_replace_rate + cfg.weight_perturb_rate:
            c = replace(c, weight=c.weight + float(jitter[i]))
        conns.append(c)
    return genome.with_connections(conns)


def mutate(
    genome: CppnGenome, cfg: NeatConfig, ledger: InnovationLedger, rng: np.random.Generator
) -> CppnGenome:
    """Apply every mutation category independently at its configured rate.

    Order: add node, delete node, add connection, delete connection, toggle,
    activation, weights.
    """
    fire = rng.random(6) < np.array(
        [
            cfg.add_node_rate,
            cfg.delete_node_rate,
            cfg.add_connection_rate,
            cfg.delete_connection_rate,
            cfg.toggle_connection_rate,
            cfg.activation_mutate_rate,
        ]
    )
    if fire[0]:
        genome = _add_node(genome, cfg, ledger, rng)
    if fire[1]:
        genome = _guarded(genome, _delete_node, cfg, rng)
    if fire[2]:
        genome = _add_connection(genome, cfg, ledger, rng)
    if fire[3]:
        genome = _guarded(genome, _delete_connection, cfg, rng)
    if fire[4]:
        genome = _guarded(genome, _toggle_connection, cfg, rng)
    if fire[5]:
        genome = _mutate_activation(genome, cfg, rng)
    return _mutate_weights(genome, cfg, rng)


# ---------------------------------------------------------------------------
# generational step


def n_eligible_parents(species_size: int, survival_threshold: float) -> int:
    return max(1, math.ceil(round(survival_threshold * species_size, 9)))


def next_generation(
    population: Sequence[CppnGenome],
    species: Sequence[SpeciesRecord],
    fitnesses: Sequence[float],
    cfg: NeatConfig,
    ledger: InnovationLedger,
    rng: np.random.Generator,
    next_species_id: int | None = None,
) -> tuple[list[CppnGenome], list[SpeciesRecord]]:
    """Produce the next population and its speciation.

    ``species`` must partition ``population``; their stagnation counters are
    updated from ``fitnesses`` here.
    """
    fit = np.asarray(fitnesses, dtype=float)
    if len(fit) != len(population):
        raise ValueError("one fitness per genome required")
    ledger.new_generation()

    stats = []
    for s in species:
        best = float(fit[s.members].max())
        if best > s.best_fitness_ever:
            stats.append(replace(s, best_fitness_ever=best, stagnation=0, members=list(s.members)))
        else:
            stats.append(replace(s, stagnation=s.stagnation + 1, members=list(s.members)))
    alive = [s for s in stats if s.stagnation < cfg.max_stagnation]
    if not alive:
        alive = [max(stats, key=lambda s: (s.best_fitness_ever, -s.species_id))]

    counts = shared_fitness_allotment(alive, fit, cfg.population_size)
    children: list[CppnGenome] = []
    for s, count in zip(alive, counts):
        if count == 0:
            continue
        ranked = sorted(s.members, key=lambda i: -fit[i])
        eligible = ranked[: n_eligible_parents(len(ranked), cfg.survival_threshold)]
        made = 0
        if len(s.members) >= cfg.elitism_min_species_size:
            children.append(population[ranked[0]])
            made += 1
        while made < count:
            if len(eligible) >= 2:
                a, b = rng.choice(len(eligible), size=2, replace=False)
                pa, pb = eligible[int(a)], eligible[int(b)]
                if fit[pb] > fit[pa] or (fit[pa] == fit[pb] and rng.random() < 0.5):
                    pa, pb = pb, pa
                child = crossover(population[pa], population[pb], rng, cfg.disabled_gene_inherit_rate)
            else:
                child = population[eligible[0]]
            children.append(mutate(child, cfg, ledger, rng))
            made += 1

    reps = [
        replace(s, representative=population[s.members[int(rng.integers(len(s.members)))]], members=[])
        for s in alive
    ]
    if next_species_id is None:
        next_species_id = max(s.species_id for s in species) + 1
    return children, speciate(children, reps, cfg, next_species_id)


def activation_entropy(population: Sequence[CppnGenome]) -> float:
    """Shannon entropy (bits) of activation kinds over all non-input nodes."""
    counts = Counter(n.activation for g in population for n in g.nodes if n.role is not NodeRole.INPUT)
    total = sum(counts.values())
    if total == 0:
        return 0.0
    p = np.array(list(counts.values()), dtype=float) / total
    return float(-(p * np.log2(p)).sum())


@dataclass
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    species_count: int
    activation_entropy: float
    best_index: int


class Neat:
    """Stateful NEAT run: ask for ``population``, ``tell`` the fitnesses."""

    def __init__(self, cfg: NeatConfig, rng: np.random.Generator, init_rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng
        init_rng = rng if init_rng is None else init_rng
        self.population = [random_genome(cfg.cppn, init_rng) for _ in range(cfg.population_size)]
        self.ledger = InnovationLedger.for_config(cfg.cppn)
        self.species = speciate(self.population, [], cfg, 1)
        self.next_species_id = max(s.species_id for s in self.species) + 1
        self.generation = 0
        self.best_fitness = -math.inf
        self.best_genome: CppnGenome | None = None

    def tell(self, fitnesses: Sequence[float]) -> GenerationStats:
        fit = np.asarray(fitnesses, dtype=float)
        best = int(np.argmax(fit))
        if fit[best] > self.best_fitness:
            self.best_fitness = float(fit[best])
            self.best_genome = self.population[best]
        stats = GenerationStats(
            self.generation,
            float(fit[best]),
            float(fit.mean()),
            len(self.species),
            activation_entropy(self.population),
            best,
        )
        self.population, self.species = next_generation(
            self.population, self.species, fit, self.cfg, self.ledger, self.rng, self.next_species_id
        )
        self.next_species_id = max(self.next_species_id, max(s.species_id for s in self.species) + 1)
        self.generation += 1
        return stats
