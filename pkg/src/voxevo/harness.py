"""Experiment orchestration: controllers, aptitude, evolution runs and the
post-hoc robustness, material and slice studies.

Everything random flows from one master seed. ``np.random.SeedSequence``
spawns four independent streams (population init, mutation, aptitude
controllers, robustness controllers), so changing the worker count or
adding a study never shifts another stream.

Simulators are pluggable. Anything callable as ``sim(grid, phases) ->
displacement`` works (return NaN for a diverged run); an optional
``run_batch(grid, phase_list, amplitudes=None)`` method lets a simulator
reuse per-morphology setup across controllers.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import pickle
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from voxevo import __version__
from voxevo.afpo import Afpo, AfpoConfig
from voxevo.cppn import CppnConfig, CppnGenome
from voxevo.hyperneat import SubstrateSpec, build_network, substrate_cppn_config
from voxevo.morphogen import (
    DEFAULT_DIMS,
    VoxelCounts,
    VoxelGrid,
    dump_morphology_bytes,
    generate_from_cppn,
    generate_from_substrate,
    load_morphology_bytes,
    write_morphology,
)
from voxevo.neat import Neat, NeatConfig, activation_entropy
from voxevo.voxelsim import MaterialProperties, SimConfig, build_lattice, simulate_lattice

TWO_PI = 2.0 * np.pi
ALGORITHMS = ("afpo", "neat", "hyperneat")
STREAMS = ("init", "mutation", "controllers", "robustness")
SWEEP_DELTAS = (-0.10, -0.05, 0.05, 0.10)
SWEEP_PROPERTIES = ("youngs_modulus", "poissons_ratio")


# ---------------------------------------------------------------------------
# seeding and controllers


def seed_streams(master_seed: int) -> dict[str, np.random.SeedSequence]:
    """Independent child seed sequences keyed by purpose."""
    children = np.random.SeedSequence(master_seed).spawn(len(STREAMS))
    return dict(zip(STREAMS, children))


def stream_rng(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(seed_streams(master_seed)[name])


@dataclass(frozen=True)
class PhaseController:
    """Actuation phase offsets, one per contractile voxel in x-major order.

    A controller is stored as a phase stream at least as long as any body it
    drives; :meth:`for_grid` truncates it to a given morphology.
    """

    id: int
    phases: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.phases, dtype=float).ravel()
        if np.any((p < 0) | (p >= TWO_PI)):
            raise ValueError("phases must lie in [0, 2 pi)")
        p.setflags(write=False)
        object.__setattr__(self, "phases", p)

    def for_grid(self, grid: VoxelGrid) -> np.ndarray:
        n = grid.counts().contractile
        if n > len(self.phases):
            raise ValueError(f"controller {self.id} has {len(self.phases)} phases, body needs {n}")
        return self.phases[:n]


def interior_size(dims) -> int:
    """Cells a network can design: the box minus its one-voxel shell."""
    return int(np.prod([max(d - 2, 0) for d in dims]))


def sample_controllers(n: int, voxel_budget: int, rng: np.random.Generator) -> list[PhaseController]:
    """``n`` controllers with i.i.d. uniform phases on [0, 2 pi)."""
    if n < 1:
        raise ValueError("need at least one controller")
    if voxel_budget < 0:
        raise ValueError("voxel budget must be non-negative")
    phases = rng.random((n, voxel_budget)) * TWO_PI
    # guard the open upper end against rounding
    phases[phases >= TWO_PI] = 0.0
    return [PhaseController(i, phases[i]) for i in range(n)]


def controller_hash(controllers: Sequence[PhaseController]) -> str:
    h = hashlib.sha256()
    for c in controllers:
        h.update(np.int64(c.id).tobytes())
        h.update(np.ascontiguousarray(c.phases, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# simulators


@dataclass(frozen=True)
class VoxelSimulator:
    """The lattice simulator wrapped as a ``sim(grid, phases)`` callable.

    Returns the free-tip yz displacement in voxel lengths, NaN if the run
    diverged.
    """

    props: MaterialProperties = field(default_factory=MaterialProperties)
    cfg: SimConfig = field(default_factory=SimConfig)
    contractile_props: MaterialProperties | None = None

    def __call__(self, grid: VoxelGrid, phases, amplitudes=None) -> float:
        return float(self.run_batch(grid, [phases], None if amplitudes is None else [amplitudes])[0])

    def run_batch(self, grid: VoxelGrid, phase_list, amplitudes=None) -> np.ndarray:
        act = self.props if self.contractile_props is None else self.contractile_props
        lattice = build_lattice(grid, self.props, self.cfg, self.contractile_props)
        out = np.empty(len(phase_list))
        for i, phases in enumerate(phase_list):
            amp = None if amplitudes is None else amplitudes[i]
            res = simulate_lattice(lattice, phases, act, self.cfg, amp)
            out[i] = np.nan if res.diverged else res.displacement_yz
        return out


def run_batch(simulator, grid: VoxelGrid, phase_list, amplitudes=None) -> np.ndarray:
    """Displacements of ``grid`` under each phase vector (NaN = diverged)."""
    if hasattr(simulator, "run_batch"):
        return np.asarray(simulator.run_batch(grid, phase_list, amplitudes), dtype=float)
    if amplitudes is not None:
        return np.array([simulator(grid, p, a) for p, a in zip(phase_list, amplitudes)], dtype=float)
    return np.array([simulator(grid, p) for p in phase_list], dtype=float)


def _batch_job(args) -> np.ndarray:
    simulator, morph_bytes, phase_list, amplitudes = args
    grid = load_morphology_bytes(morph_bytes, check_enclosure=False)
    return run_batch(simulator, grid, phase_list, amplitudes)


class WorkerPool:
    """Ordered map of simulation batches over processes (or in-process for 1)."""

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("workers must be at least 1")
        self.workers = workers
        self._pool: ProcessPoolExecutor | None = None

    def map(self, jobs: list) -> list[np.ndarray]:
        if self.workers == 1 or len(jobs) <= 1:
            return [_batch_job(j) for j in jobs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(self.workers)
        return list(self._pool.map(_batch_job, jobs))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> WorkerPool:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __getstate__(self):
        return {"workers": self.workers, "_pool": None}


def displacements(
    grids: Sequence[VoxelGrid],
    phase_lists: Sequence[Sequence[np.ndarray]],
    simulator,
    pool: WorkerPool | None = None,
    amplitudes: Sequence | None = None,
) -> list[np.ndarray]:
    """One batch of simulations per grid, results in input order."""
    pool = WorkerPool(1) if pool is None else pool
    jobs = [
        (simulator, dump_morphology_bytes(g), list(p), None if amplitudes is None else amplitudes[i])
        for i, (g, p) in enumerate(zip(grids, phase_lists))
    ]
    return pool.map(jobs)


# ---------------------------------------------------------------------------
# aptitude and robustness


def mean_displacement(samples) -> float:
    """Mean over controllers with diverged (NaN) runs counted as zero.

    Summation runs in controller order, so the value does not depend on how
    the simulations were scheduled.
    """
    s = np.nan_to_num(np.asarray(samples, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)
    if len(s) == 0:
        raise ValueError("no samples")
    return math.fsum(s.tolist()) / len(s)


def aptitude(
    grid: VoxelGrid,
    controllers: Sequence[PhaseController],
    simulator=None,
    pool: WorkerPool | None = None,
) -> float:
    """Mean tip displacement over the run's frozen controllers.

    The voxel count is not penalized.
    """
    simulator = VoxelSimulator() if simulator is None else simulator
    (d,) = displacements([grid], [[c.for_grid(grid) for c in controllers]], simulator, pool)
    return mean_displacement(d)


@dataclass
class RobustnessResult:
    samples: np.ndarray  # raw displacements; NaN marks a diverged run
    controller_ids: np.ndarray

    @property
    def scores(self) -> np.ndarray:
        return np.nan_to_num(self.samples, nan=0.0, posinf=0.0, neginf=0.0)

    @property
    def mean(self) -> float:
        return mean_displacement(self.samples)

    @property
    def min(self) -> float:
        return float(self.scores.min())

    @property
    def max(self) -> float:
        return float(self.scores.max())

    @property
    def median(self) -> float:
        return float(np.median(self.scores))

    @property
    def diverged(self) -> int:
        return int(np.count_nonzero(~np.isfinite(self.samples)))

    def summary(self) -> dict:
        return {
            "n": len(self.samples),
            "mean": self.mean,
            "min": self.min,
            "max": self.max,
            "median": self.median,
            "diverged": self.diverged,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["controller_id", "displacement"])
        for cid, s in zip(self.controller_ids, self.scores):
            w.writerow([int(cid), repr(float(s))])
        return buf.getvalue()


def robustness(
    grid: VoxelGrid,
    n: int = 1000,
    rng: np.random.Generator | None = None,
    simulator=None,
    pool: WorkerPool | None = None,
    chunk: int = 50,
) -> RobustnessResult:
    """Displacement distribution over ``n`` fresh random controllers."""
    rng = np.random.default_rng() if rng is None else rng
    simulator = VoxelSimulator() if simulator is None else simulator
    controllers = sample_controllers(n, interior_size(grid.dims), rng)
    phases = [c.for_grid(grid) for c in controllers]
    # split into chunks so a pool can spread one morphology over workers
    parts = [phases[i : i + chunk] for i in range(0, n, chunk)]
    out = displacements([grid] * len(parts), parts, simulator, pool)
    return RobustnessResult(np.concatenate(out), np.arange(n))


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "afpo"
    seed: int = 0
    population_size: int = 100
    generations: int = 3000
    controllers: int = 25
    dims: tuple[int, int, int] = DEFAULT_DIMS
    props: MaterialProperties = field(default_factory=MaterialProperties)
    contractile_props: MaterialProperties | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    out_dir: str = "runs/run"
    run_id: str = "run"
    substrate_hidden: int = 2
    substrate_width: int = 5
    interior_passive: str = "allow"
    workers: int = 1
    checkpoint_every: int = 1
    neat: NeatConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, not {self.algorithm!r}")
        if self.controllers < 1:
            raise ValueError("controllers per aptitude must be at least 1")
        if self.population_size < 2:
            raise ValueError("population size must be at least 2")
        if self.generations < 1:
            raise ValueError("generations must be at least 1")
        if len(self.dims) != 3 or min(self.dims) < 3:
            raise ValueError("dims must be three sizes of at least 3")
        if not (1 <= self.substrate_hidden <= 5 and 1 <= self.substrate_width <= 5):
            raise ValueError("substrate hidden layers and width must lie in [1, 5]")
        if self.interior_passive not in ("allow", "forbid"):
            raise ValueError("interior_passive must be 'allow' or 'forbid'")
        if self.workers < 1 or self.checkpoint_every < 1:
            raise ValueError("workers and checkpoint_every must be positive")

    @property
    def substrate(self) -> SubstrateSpec:
        return SubstrateSpec.grid(self.substrate_hidden, self.substrate_width)

    def neat_config(self) -> NeatConfig:
        base = NeatConfig() if self.neat is None else self.neat
        cppn = substrate_cppn_config(self.substrate) if self.algorithm == "hyperneat" else CppnConfig()
        return dataclasses.replace(base, population_size=self.population_size, generations=self.generations, cppn=cppn)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        if self.neat is not None:
            d["neat"].pop("cppn", None)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        data = dict(data)
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        if "props" in data:
            data["props"] = MaterialProperties(**data["props"])
        if data.get("contractile_props") is not None:
            data["contractile_props"] = MaterialProperties(**data["contractile_props"])
        if "sim" in data:
            data["sim"] = SimConfig(**data["sim"])
        if data.get("neat") is not None:
            neat = dict(data["neat"])
            neat.pop("cppn", None)
            data["neat"] = NeatConfig(**neat)
        return cls(**data)

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# evaluation with memoisation


@dataclass(frozen=True)
class Evaluation:
    aptitude: float
    counts: VoxelCounts
    diverged: int
    morphology: bytes


class Evaluator:
    """Genome -> morphology -> aptitude under one frozen controller set.

    Aptitudes are memoised by morphology bytes: the simulator is
    deterministic, so equal bodies under equal controllers score equally.
    """

    def __init__(self, config: RunConfig, controllers: Sequence[PhaseController], simulator=None, pool=None):
        self.config = config
        self.controllers = list(controllers)
        self.simulator = (
            VoxelSimulator(config.props, config.sim, config.contractile_props) if simulator is None else simulator
        )
        self.pool = WorkerPool(config.workers) if pool is None else pool
        self.cache: dict[bytes, tuple[float, int]] = {}
        self._substrate = config.substrate if config.algorithm == "hyperneat" else None

    def morphology(self, genome: CppnGenome) -> VoxelGrid:
        cfg = self.config
        if self._substrate is not None:
            net = build_network(genome, self._substrate)
            return generate_from_substrate(net, cfg.dims, interior_passive=cfg.interior_passive)
        return generate_from_cppn(genome, cfg.dims, interior_passive=cfg.interior_passive)

    def evaluate_grids(self, grids: Sequence[VoxelGrid]) -> list[Evaluation]:
        keys = [dump_morphology_bytes(g) for g in grids]
        todo: dict[bytes, VoxelGrid] = {}
        for k, g in zip(keys, grids):
            if k not in self.cache and k not in todo:
                todo[k] = g
        if todo:
            batch = list(todo.values())
            phase_lists = [[c.for_grid(g) for c in self.controllers] for g in batch]
            results = displacements(batch, phase_lists, self.simulator, self.pool)
            for k, d in zip(todo, results):
                self.cache[k] = (mean_displacement(d), int(np.count_nonzero(~np.isfinite(d))))
        return [Evaluation(self.cache[k][0], g.counts(), self.cache[k][1], k) for k, g in zip(keys, grids)]

    def evaluate(self, genomes: Sequence[CppnGenome]) -> list[Evaluation]:
        return self.evaluate_grids([self.morphology(g) for g in genomes])

    def aptitudes(self, genomes: Sequence[CppnGenome]) -> list[float]:
        return [e.aptitude for e in self.evaluate(genomes)]

    def __getstate__(self):
        state = dict(self.__dict__)
        state["pool"] = WorkerPool(self.pool.workers)
        return state


# ---------------------------------------------------------------------------
# evolution runs

GENERATION_FIELDS = [
    "run_id",
    "generation",
    "best",
    "mean",
    "best_so_far",
    "species_count",
    "activation_entropy",
    "controller_hash",
    "best_total",
    "best_passive",
    "best_contractile",
    "diverged",
    "wall_time",
]
INDIVIDUAL_FIELDS = [
    "run_id",
    "generation",
    "individual_id",
    "aptitude",
    "total",
    "passive",
    "contractile",
    "age",
    "species",
    "wall_time",
]
WALL_TIME_COLUMNS = ("wall_time",)


@dataclass
class RunState:
    """Everything needed to continue a run; pickled as the checkpoint."""

    config: RunConfig
    engine: Any
    evaluator: Evaluator
    controllers: list[PhaseController]
    generation: int = 0
    best_so_far: float = -math.inf
    best_genome: CppnGenome | None = None
    best_morphology: bytes | None = None
    csv_offsets: dict[str, int] = field(default_factory=dict)
    elapsed: float = 0.0


@dataclass
class RunResult:
    out_dir: Path
    generations: int
    best_aptitude: float
    best_genome: CppnGenome
    best_morphology: VoxelGrid
    controller_hash: str
    history: list[float]


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else str(x)


def _append_rows(path: Path, fields: list[str], rows: list[dict]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in fields])


def manifest(config: RunConfig) -> dict:
    import numba
    import scipy

    streams = seed_streams(config.seed)
    return {
        "package": "voxevo",
        "version": __version__,
        "config": config.to_dict(),
        "seeds": {
            "master": config.seed,
            **{k: {"entropy": s.entropy, "spawn_key": list(s.spawn_key)} for k, s in streams.items()},
        },
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }


def _write_controllers(path: Path, controllers: Sequence[PhaseController]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["controller_id", "index", "phase"])
        for c in controllers:
            for i, p in enumerate(c.phases):
                w.writerow([c.id, i, repr(float(p))])


def read_controllers(path) -> list[PhaseController]:
    phases: dict[int, list[float]] = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            phases.setdefault(int(row["controller_id"]), []).append(float(row["phase"]))
    return [PhaseController(cid, np.array(p)) for cid, p in sorted(phases.items())]


def _new_state(config: RunConfig, simulator) -> RunState:
    streams = seed_streams(config.seed)
    init_rng = np.random.default_rng(streams["init"])
    mut_rng = np.random.default_rng(streams["mutation"])
    controllers = sample_controllers(
        config.controllers, interior_size(config.dims), np.random.default_rng(streams["controllers"])
    )
    if config.algorithm == "afpo":
        neat_cfg = config.neat_config()
        engine = Afpo(AfpoConfig(config.population_size, neat_cfg.cppn, neat_cfg), mut_rng, init_rng)
    else:
        engine = Neat(config.neat_config(), mut_rng, init_rng)
    return RunState(config, engine, Evaluator(config, controllers, simulator), controllers)


def _truncate(path: Path, size: int) -> None:
    with path.open("r+b") as fh:
        fh.truncate(size)


def _generation(state: RunState) -> tuple[list[dict], dict, CppnGenome, Evaluation]:
    """Evaluate the current generation and advance the engine."""
    cfg, ev, eng = state.config, state.evaluator, state.engine
    g = state.generation
    if cfg.algorithm == "afpo":
        pop = eng.start(ev.aptitudes) if g == 0 else eng.step(ev.aptitudes)
        genomes = [a.genome for a in pop]
        # every body is memoised by now, so this only re-derives counts
        evals = ev.evaluate(genomes)
        ids = [a.uid for a in pop]
        ages = [a.age for a in pop]
        species = [None] * len(pop)
        n_species = None
        entropy = activation_entropy(genomes)
    else:
        genomes = list(eng.population)
        evals = ev.evaluate(genomes)
        ids = [g * cfg.population_size + i for i in range(len(genomes))]
        ages = [None] * len(genomes)
        membership = {i: s.species_id for s in eng.species for i in s.members}
        species = [membership[i] for i in range(len(genomes))]
        n_species = len(eng.species)
        entropy = activation_entropy(genomes)
        eng.tell([e.aptitude for e in evals])

    apt = np.array([e.aptitude for e in evals])
    best = int(np.argmax(apt))
    rows = [
        {
            "run_id": cfg.run_id,
            "generation": g,
            "individual_id": ids[i],
            "aptitude": float(apt[i]),
            "total": e.counts.total,
            "passive": e.counts.passive,
            "contractile": e.counts.contractile,
            "age": ages[i],
            "species": species[i],
        }
        for i, e in enumerate(evals)
    ]
    summary = {
        "run_id": cfg.run_id,
        "generation": g,
        "best": float(apt[best]),
        "mean": math.fsum(apt.tolist()) / len(apt),
        "species_count": n_species,
        "activation_entropy": entropy,
        "controller_hash": controller_hash(state.controllers),
        "best_total": evals[best].counts.total,
        "best_passive": evals[best].counts.passive,
        "best_contractile": evals[best].counts.contractile,
        "diverged": sum(e.diverged for e in evals),
    }
    return rows, summary, genomes[best], evals[best]


def evolve(
    config: RunConfig,
    simulator=None,
    resume: bool = False,
    stop_after: int | None = None,
    progress: Callable[[dict], None] | None = None,
    observe: Callable[[RunState], None] | None = None,
) -> RunResult:
    """Run (or resume) an evolution and write its artifacts to ``config.out_dir``.

    Args:
        simulator: replaces the lattice simulator (see module docstring).
        resume: continue from ``checkpoint.pkl`` if present. The rows written
            after the checkpoint are discarded and regenerated.
        stop_after: stop once this generation index has been logged, leaving
            a checkpoint behind (for interrupting long runs).
        progress: called with each generation's summary row.
        observe: called with the live run state after each generation
            (for diagnostics; it must not mutate the state).

    Artifacts: ``generations.csv``, ``individuals.csv``, ``controllers.csv``,
    ``best_genome.json``, ``best_morphology.txt``, ``checkpoint.pkl`` and
    ``manifest.json``.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pkl"
    gen_csv, ind_csv = out / "generations.csv", out / "individuals.csv"

    if resume and ckpt.exists():
        with ckpt.open("rb") as fh:
            state: RunState = pickle.load(fh)
        if state.config.to_dict() | {"generations": 0, "workers": 0} != config.to_dict() | {
            "generations": 0,
            "workers": 0,
        }:
            raise ValueError("checkpoint was written by a different run configuration")
        state.config = config
        state.evaluator.config = config
        state.evaluator.pool = WorkerPool(config.workers)
        if simulator is not None:
            state.evaluator.simulator = simulator
        for path in (gen_csv, ind_csv):
            _truncate(path, state.csv_offsets.get(path.name, 0))
    else:
        for path in (gen_csv, ind_csv, ckpt):
            path.unlink(missing_ok=True)
        state = _new_state(config, simulator)
        _write_controllers(out / "controllers.csv", state.controllers)
        (out / "manifest.json").write_text(json.dumps(manifest(config), indent=2) + "\n")

    frozen_hash = controller_hash(state.controllers)
    history: list[float] = []
    started = time.perf_counter() - state.elapsed
    try:
        while state.generation < config.generations:
            rows, summary, best_genome, best_eval = _generation(state)
            if summary["controller_hash"] != frozen_hash:
                raise RuntimeError("aptitude controllers changed during the run")
            if summary["best"] > state.best_so_far:
                state.best_so_far = summary["best"]
                state.best_genome = best_genome
                state.best_morphology = best_eval.morphology
            summary["best_so_far"] = state.best_so_far
            wall = time.perf_counter() - started
            summary["wall_time"] = wall
            for r in rows:
                r["wall_time"] = wall
            _append_rows(gen_csv, GENERATION_FIELDS, [summary])
            _append_rows(ind_csv, INDIVIDUAL_FIELDS, rows)
            history.append(summary["best_so_far"])
            if progress is not None:
                progress(summary)
            if observe is not None:
                observe(state)
            state.generation += 1
            state.elapsed = wall
            last = state.generation == config.generations or state.generation - 1 == stop_after
            if last or state.generation % config.checkpoint_every == 0:
                _save_best(out, state)
                _checkpoint(ckpt, state, gen_csv, ind_csv)
            if stop_after is not None and state.generation > stop_after:
                break
    finally:
        state.evaluator.pool.close()

    return RunResult(
        out,
        state.generation,
        state.best_so_far,
        state.best_genome,
        load_morphology_bytes(state.best_morphology),
        frozen_hash,
        history,
    )


def _save_best(out: Path, state: RunState) -> None:
    (out / "best_genome.json").write_text(state.best_genome.dumps() + "\n")
    write_morphology(load_morphology_bytes(state.best_morphology), out / "best_morphology.txt")


def _checkpoint(path: Path, state: RunState, *csvs: Path) -> None:
    state.csv_offsets = {p.name: p.stat().st_size for p in csvs}
    tmp = path.with_suffix(".tmp")
    with tmp.open("wb") as fh:
        pickle.dump(state, fh)
    os.replace(tmp, path)


def random_baseline(
    config: RunConfig,
    n: int = 100,
    simulator=None,
    controllers: Sequence[PhaseController] | None = None,
    seed_offset: int = 1,
) -> np.ndarray:
    """Aptitudes of ``n`` random initial genomes under a run's controllers.

    The genomes come from a stream independent of the run's own init
    stream; the controllers default to the run's frozen set.
    """
    if controllers is None:
        controllers = sample_controllers(
            config.controllers, interior_size(config.dims), stream_rng(config.seed, "controllers")
        )
    from voxevo.cppn import random_genome

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(len(STREAMS) + seed_offset)[-1])
    cppn_cfg = config.neat_config().cppn
    genomes = [random_genome(cppn_cfg, rng) for _ in range(n)]
    ev = Evaluator(config, controllers, simulator)
    try:
        return np.array(ev.aptitudes(genomes))
    finally:
        ev.pool.close()


# ---------------------------------------------------------------------------
# post-hoc studies


@dataclass
class SweepScenario:
    name: str
    parameter: str | None
    delta: float
    value: float | None
    result: RobustnessResult


def perturbed_props(base: MaterialProperties, parameter: str, delta: float) -> MaterialProperties:
    """``base`` with one property scaled by ``1 + delta``.

    Raises:
        ValueError: if the perturbed Poisson ratio reaches 0.5.
    """
    if parameter not in SWEEP_PROPERTIES:
        raise ValueError(f"cannot sweep {parameter!r}")
    value = getattr(base, parameter) * (1.0 + delta)
    if parameter == "poissons_ratio" and value >= 0.5:
        raise ValueError(f"perturbed Poisson ratio {value:g} is not below 0.5")
    return dataclasses.replace(base, **{parameter: value})


def material_sweep(
    grid: VoxelGrid,
    props: MaterialProperties | None = None,
    cfg: SimConfig | None = None,
    seed: int = 0,
    n: int = 1000,
    deltas: Sequence[float] = SWEEP_DELTAS,
    parameters: Sequence[str] = SWEEP_PROPERTIES,
    target: str = "contractile",
    simulator_factory: Callable[[MaterialProperties, MaterialProperties | None], Any] | None = None,
    pool: WorkerPool | None = None,
) -> list[SweepScenario]:
    """Robustness of ``grid`` under perturbed material constants.

    Every scenario (and the baseline) draws the same ``n`` controllers from
    the ``robustness`` stream of ``seed``, so differences come from the
    material alone.

    Args:
        target: ``"contractile"`` perturbs only the contractile material,
            ``"both"`` perturbs both materials.
        simulator_factory: ``(passive_props, contractile_props) -> simulator``;
            defaults to the lattice simulator under ``cfg``.
    """
    props = MaterialProperties() if props is None else props
    cfg = SimConfig() if cfg is None else cfg
    if target not in ("contractile", "both"):
        raise ValueError("target must be 'contractile' or 'both'")
    if simulator_factory is None:

        def simulator_factory(p, c):
            return VoxelSimulator(p, cfg, c)

    plan: list[tuple[str, str | None, float, MaterialProperties, MaterialProperties | None]] = [
        ("baseline", None, 0.0, props, None)
    ]
    for param in parameters:
        for d in deltas:
            mod = perturbed_props(props, param, d)
            passive, contractile = (props, mod) if target == "contractile" else (mod, None)
            plan.append((f"{param}{d:+.0%}", param, d, passive, contractile))

    out = []
    for name, param, d, passive, contractile in plan:
        sim = simulator_factory(passive, contractile)
        res = robustness(grid, n, stream_rng(seed, "robustness"), sim, pool)
        value = None if param is None else getattr(contractile or passive, param)
        out.append(SweepScenario(name, param, d, value, res))
    return out


def sweep_csv(scenarios: Sequence[SweepScenario]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "parameter", "delta", "value", "controller_id", "displacement"])
    for s in scenarios:
        for cid, d in zip(s.result.controller_ids, s.result.scores):
            w.writerow([s.name, s.parameter or "", repr(s.delta), _fmt(s.value), int(cid), repr(float(d))])
    return buf.getvalue()


@dataclass
class AblationRow:
    scenario: str
    slice_x: int | None
    voxels_ablated: int
    displacement: float


def slice_ablation(
    grid: VoxelGrid,
    controller: PhaseController,
    simulator=None,
    mode: str = "zero-phase",
    pool: WorkerPool | None = None,
) -> list[AblationRow]:
    """Displacement with each interior x-slice's actuation ablated in turn.

    Scenario ``n`` copies ``controller`` and, for every contractile voxel at
    x index ``n``, sets its phase to 0 (``mode="zero-phase"``) or its
    actuation amplitude to 0 (``mode="disable"``). The first row is the
    unmodified baseline.
    """
    if mode not in ("zero-phase", "disable"):
        raise ValueError("mode must be 'zero-phase' or 'disable'")
    simulator = VoxelSimulator() if simulator is None else simulator
    X = grid.dims[0]
    if X != DEFAULT_DIMS[0]:
        warnings.warn(f"x size {X} differs from the default; ablating {X - 2} slices", stacklevel=2)
    base = controller.for_grid(grid)
    xs = grid.contractile_cells()[:, 0]
    slices = list(range(1, X - 1))

    phase_list, amps = [base], []
    amp_full = _full_amplitude(simulator)
    amps.append(np.full(len(base), amp_full))
    for x in slices:
        hit = xs == x
        phases = base.copy()
        amp = np.full(len(base), amp_full)
        if mode == "zero-phase":
            phases[hit] = 0.0
        else:
            amp[hit] = 0.0
        phase_list.append(phases)
        amps.append(amp)
    (d,) = displacements([grid], [phase_list], simulator, pool, [amps if mode == "disable" else None])
    d = np.nan_to_num(d, nan=0.0)
    rows = [AblationRow("baseline", None, 0, float(d[0]))]
    for i, x in enumerate(slices, start=1):
        rows.append(AblationRow(f"slice{x}", x, int(np.count_nonzero(xs == x)), float(d[i])))
    return rows


def _full_amplitude(simulator) -> float:
    props = getattr(simulator, "contractile_props", None) or getattr(simulator, "props", None)
    return props.actuation_amplitude if props is not None else MaterialProperties().actuation_amplitude


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "slice_x", "voxels_ablated", "displacement"])
    for r in rows:
        w.writerow([r.scenario, _fmt(r.slice_x), r.voxels_ablated, repr(r.displacement)])
    return buf.getvalue()


def best_controller(
    grid: VoxelGrid, controllers: Sequence[PhaseController], simulator=None, pool: WorkerPool | None = None
) -> tuple[PhaseController, float]:
    """The controller giving ``grid`` the largest displacement (first on ties)."""
    simulator = VoxelSimulator() if simulator is None else simulator
    (d,) = displacements([grid], [[c.for_grid(grid) for c in controllers]], simulator, pool)
    d = np.nan_to_num(d, nan=0.0)
    i = int(np.argmax(d))
    return controllers[i], float(d[i])


def substrate_sweep(
    base: RunConfig,
    hidden_range: Sequence[int] = range(1, 6),
    width_range: Sequence[int] = range(1, 6),
    simulator=None,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """One HyperNEAT run per (hidden layers, width) substrate shape."""
    rows = []
    for h in hidden_range:
        for w in width_range:
            cfg = dataclasses.replace(
                base,
                algorithm="hyperneat",
                substrate_hidden=h,
                substrate_width=w,
                out_dir=str(Path(base.out_dir) / f"h{h}_w{w}"),
                run_id=f"{base.run_id}_h{h}_w{w}",
            )
            res = evolve(cfg, simulator)
            row = {"hidden_layers": h, "width": w, "best_aptitude": res.best_aptitude}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows
