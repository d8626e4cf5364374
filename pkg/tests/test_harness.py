from __future__ import annotations

import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats
from stubs import ConstantSim, PhaseSumSim, RecordingSim

from voxevo.harness import (
    GENERATION_FIELDS,
    INDIVIDUAL_FIELDS,
    TWO_PI,
    PhaseController,
    RunConfig,
    VoxelSimulator,
    WorkerPool,
    ablation_csv,
    aptitude,
    best_controller,
    controller_hash,
    evolve,
    interior_size,
    material_sweep,
    mean_displacement,
    perturbed_props,
    random_baseline,
    read_controllers,
    robustness,
    sample_controllers,
    seed_streams,
    slice_ablation,
    stream_rng,
    sweep_csv,
)
from voxevo.morphogen import Material, VoxelGrid, boundary_mask, read_morphology
from voxevo.voxelsim import MaterialProperties, SimConfig


def striped_grid(dims=(20, 8, 8), empty_slices=()) -> VoxelGrid:
    m = np.full(dims, int(Material.CONTRACTILE), np.int8)
    m[boundary_mask(dims)] = Material.PASSIVE
    for x in empty_slices:
        m[x, 1:-1, 1:-1] = Material.PASSIVE
    return VoxelGrid(m)


def strip_wall_time(text: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        return rows
    keep = [i for i, h in enumerate(rows[0]) if h != "wall_time"]
    return [[r[i] for i in keep] for r in rows]


# ---- seeding and controllers ---------------------------------------------


def test_streams_are_distinct_and_reproducible():
    a = {k: stream_rng(7, k).random(4).tolist() for k in seed_streams(7)}
    b = {k: stream_rng(7, k).random(4).tolist() for k in seed_streams(7)}
    assert a == b
    assert len({tuple(v) for v in a.values()}) == len(a)
    assert stream_rng(8, "init").random() != stream_rng(7, "init").random()


def test_controllers_deterministic_and_sized():
    a = sample_controllers(25, interior_size((20, 8, 8)), np.random.default_rng(3))
    b = sample_controllers(25, 648, np.random.default_rng(3))
    assert len(a) == 25 and all(len(c.phases) == 648 for c in a)
    assert controller_hash(a) == controller_hash(b)
    assert controller_hash(a) != controller_hash(sample_controllers(25, 648, np.random.default_rng(4)))
    assert [c.id for c in a] == list(range(25))


def test_controller_phases_are_uniform():
    c = sample_controllers(1000, 1000, np.random.default_rng(11))
    p = np.concatenate([x.phases for x in c])
    assert p.size == 1_000_000
    assert p.min() >= 0.0 and p.max() < TWO_PI
    counts = np.histogram(p, bins=10, range=(0, TWO_PI))[0]
    assert np.all(np.abs(counts - 100_000) <= 5 * math.sqrt(100_000 * 0.9))
    assert stats.chisquare(counts).pvalue > 1e-3
    assert stats.kstest(p[:100_000] / TWO_PI, "uniform").pvalue > 1e-3


def test_controller_validation_and_truncation():
    with pytest.raises(ValueError):
        PhaseController(0, [0.0, TWO_PI])
    with pytest.raises(ValueError):
        sample_controllers(0, 5, np.random.default_rng(0))
    c = PhaseController(0, np.linspace(0, 6, 700))
    grid = striped_grid()
    np.testing.assert_array_equal(c.for_grid(grid), c.phases[:648])
    with pytest.raises(ValueError):
        PhaseController(1, [0.1]).for_grid(grid)
    with pytest.raises(ValueError):
        c.phases[0] = 1.0


# ---- aptitude --------------------------------------------------------------


def test_mean_counts_divergence_as_zero():
    assert mean_displacement([1.0, np.nan, 2.0, 3.0]) == 1.5
    with pytest.raises(ValueError):
        mean_displacement([])


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=60), st.randoms())
def test_mean_is_exact_and_order_free(values, rnd):
    shuffled = list(values)
    rnd.shuffle(shuffled)
    assert mean_displacement(values) == mean_displacement(shuffled) == math.fsum(values) / len(values)


def test_aptitude_matches_manual_mean():
    grid = striped_grid((6, 4, 4))
    ctrls = sample_controllers(7, interior_size(grid.dims), np.random.default_rng(1))
    sim = PhaseSumSim()
    manual = math.fsum(sim(grid, c.for_grid(grid)) for c in ctrls) / 7
    assert aptitude(grid, ctrls, sim) == manual
    assert aptitude(grid, ctrls[::-1], sim) == manual


def test_aptitude_with_real_simulator():
    grid = striped_grid((5, 4, 4))
    sim = VoxelSimulator(cfg=SimConfig(duration=0.1))
    ctrls = sample_controllers(3, interior_size(grid.dims), np.random.default_rng(2))
    each = [sim(grid, c.for_grid(grid)) for c in ctrls]
    np.testing.assert_array_equal(sim.run_batch(grid, [c.for_grid(grid) for c in ctrls]), each)
    assert aptitude(grid, ctrls, sim) == math.fsum(each) / 3


def test_worker_pool_preserves_order():
    grid = striped_grid((6, 4, 4))
    ctrls = sample_controllers(9, interior_size(grid.dims), np.random.default_rng(5))
    with WorkerPool(3) as pool:
        assert aptitude(grid, ctrls, PhaseSumSim(), pool) == aptitude(grid, ctrls, PhaseSumSim())


# ---- robustness ------------------------------------------------------------


def test_robustness_constant_stub():
    res = robustness(striped_grid((5, 4, 4)), 40, np.random.default_rng(0), ConstantSim(2.5))
    assert len(res.samples) == 40
    assert res.mean == res.min == res.max == res.median == 2.5
    lines = res.to_csv().splitlines()
    assert lines[0] == "controller_id,displacement" and len(lines) == 41


def test_robustness_mean_recomputes_from_csv():
    res = robustness(striped_grid((6, 4, 4)), 1000, np.random.default_rng(9), PhaseSumSim(), chunk=64)
    vals = [float(r["displacement"]) for r in csv.DictReader(io.StringIO(res.to_csv()))]
    assert len(vals) == 1000
    assert abs(res.summary()["mean"] - math.fsum(vals) / 1000) <= 1e-12
    assert res.summary()["n"] == 1000


# ---- run configuration -----------------------------------------------------


def test_run_config_roundtrip(tmp_path):
    cfg = RunConfig(
        algorithm="hyperneat",
        seed=4,
        dims=(6, 5, 4),
        props=MaterialProperties(youngs_modulus=4e6),
        contractile_props=MaterialProperties(poissons_ratio=0.3),
        sim=SimConfig(duration=0.5),
        substrate_hidden=3,
    )
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(path) == cfg


@pytest.mark.parametrize(
    "bad",
    [
        dict(algorithm="cmaes"),
        dict(controllers=0),
        dict(population_size=1),
        dict(dims=(2, 8, 8)),
        dict(substrate_width=6),
        dict(interior_passive="no"),
        dict(workers=0),
    ],
)
def test_run_config_validation(bad):
    with pytest.raises(ValueError):
        RunConfig(**bad)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"colour": "red"})


# ---- evolution -------------------------------------------------------------


def small_config(tmp_path, algorithm="afpo", **kw) -> RunConfig:
    base = dict(
        algorithm=algorithm,
        seed=3,
        population_size=6,
        generations=4,
        controllers=3,
        dims=(6, 4, 4),
        out_dir=str(tmp_path / algorithm),
        run_id=algorithm,
    )
    base.update(kw)
    return RunConfig(**base)


def test_evolve_smoke(tmp_path):
    cfg = small_config(tmp_path, population_size=2, generations=1)
    res = evolve(cfg, PhaseSumSim())
    out = res.out_dir
    for name in ("generations.csv", "individuals.csv", "controllers.csv", "best_genome.json",
                 "best_morphology.txt", "checkpoint.pkl", "manifest.json"):  # fmt: skip
        assert (out / name).exists(), name
    gens = list(csv.DictReader((out / "generations.csv").open()))
    assert list(gens[0]) == GENERATION_FIELDS and len(gens) == 1
    inds = list(csv.DictReader((out / "individuals.csv").open()))
    assert list(inds[0]) == INDIVIDUAL_FIELDS and len(inds) == 2
    assert len(read_controllers(out / "controllers.csv")) == 3
    man = json.loads((out / "manifest.json").read_text())
    assert man["seeds"]["master"] == 3 and man["config"]["algorithm"] == "afpo"


@pytest.mark.parametrize("algorithm", ["afpo", "neat", "hyperneat"])
def test_evolve_logs_are_consistent(tmp_path, algorithm):
    cfg = small_config(tmp_path, algorithm)
    res = evolve(cfg, PhaseSumSim())
    gens = list(csv.DictReader((res.out_dir / "generations.csv").open()))
    inds = list(csv.DictReader((res.out_dir / "individuals.csv").open()))
    assert len(gens) == cfg.generations and len(inds) == cfg.generations * cfg.population_size
    best_so_far = [float(g["best_so_far"]) for g in gens]
    assert all(b >= a for a, b in zip(best_so_far, best_so_far[1:]))
    assert len({g["controller_hash"] for g in gens}) == 1
    for g in gens:
        rows = [r for r in inds if r["generation"] == g["generation"]]
        assert float(g["best"]) == max(float(r["aptitude"]) for r in rows)
        for r in rows:
            assert int(r["total"]) == int(r["passive"]) + int(r["contractile"])
    # the exported best body reproduces its logged counts and aptitude
    grid = read_morphology(res.out_dir / "best_morphology.txt")
    assert grid == res.best_morphology
    assert res.best_aptitude == best_so_far[-1]
    ctrls = read_controllers(res.out_dir / "controllers.csv")
    assert aptitude(grid, ctrls, PhaseSumSim()) == res.best_aptitude
    if algorithm == "afpo":
        ages = [[int(r["age"]) for r in inds if r["generation"] == str(k)] for k in range(cfg.generations)]
        # the newcomer is never dominated; refill mutants of it also carry age 1
        assert all(min(a) == 1 for a in ages)


@pytest.mark.parametrize("algorithm", ["afpo", "neat", "hyperneat"])
def test_resume_reproduces_uninterrupted_run(tmp_path, algorithm):
    full = evolve(small_config(tmp_path / "a", algorithm), PhaseSumSim())
    cfg = small_config(tmp_path / "b", algorithm)
    evolve(cfg, PhaseSumSim(), stop_after=1)
    resumed = evolve(cfg, PhaseSumSim(), resume=True)
    assert resumed.best_aptitude == full.best_aptitude
    for name in ("generations.csv", "individuals.csv", "controllers.csv"):
        a = (full.out_dir / name).read_text()
        b = (resumed.out_dir / name).read_text()
        assert strip_wall_time(a) == strip_wall_time(b), name


def test_resume_rejects_other_config(tmp_path):
    cfg = small_config(tmp_path)
    evolve(cfg, PhaseSumSim(), stop_after=0)
    with pytest.raises(ValueError):
        evolve(small_config(tmp_path, seed=99), PhaseSumSim(), resume=True)


def test_worker_count_does_not_change_results(tmp_path):
    one = evolve(small_config(tmp_path / "one", "neat"), PhaseSumSim())
    three = evolve(small_config(tmp_path / "three", "neat", workers=3), PhaseSumSim())
    for name in ("generations.csv", "individuals.csv"):
        assert strip_wall_time((one.out_dir / name).read_text()) == strip_wall_time(
            (three.out_dir / name).read_text()
        )


def test_random_baseline_uses_run_controllers(tmp_path):
    cfg = small_config(tmp_path)
    a = random_baseline(cfg, 8, PhaseSumSim())
    b = random_baseline(cfg, 8, PhaseSumSim())
    assert len(a) == 8
    np.testing.assert_array_equal(a, b)
    assert np.all(random_baseline(cfg, 8, ConstantSim(0.25)) == 0.25)


# ---- material sweep ----------------------------------------------------------


def recording_factory(passive, contractile):
    c = contractile or passive
    return RecordingSim(c.youngs_modulus, c.poissons_ratio)


def test_sweep_scenarios_and_values():
    grid = striped_grid((5, 4, 4))
    out = material_sweep(grid, n=6, seed=1, simulator_factory=recording_factory)
    assert len(out) == 9 and out[0].name == "baseline"
    perturbed = out[1:]
    ym = [s.value for s in perturbed if s.parameter == "youngs_modulus"]
    pr = [s.value for s in perturbed if s.parameter == "poissons_ratio"]
    np.testing.assert_allclose(ym, [5e6 * f for f in (0.9, 0.95, 1.05, 1.1)], rtol=1e-15)
    np.testing.assert_allclose(pr, [0.35 * f for f in (0.9, 0.95, 1.05, 1.1)], rtol=1e-15)
    for s in perturbed:
        other = 0.35 if s.parameter == "youngs_modulus" else 5e6
        assert s.result.mean == pytest.approx(s.value + other, rel=1e-15)
    text = sweep_csv(out)
    assert len(text.strip().splitlines()) == 1 + 9 * 6


def test_sweep_uses_identical_controllers():
    grid = striped_grid((6, 4, 4))
    out = material_sweep(grid, n=10, seed=2, simulator_factory=lambda p, c: PhaseSumSim())
    for s in out[1:]:
        np.testing.assert_array_equal(s.result.samples, out[0].result.samples)


def test_sweep_zero_delta_equals_baseline():
    grid = striped_grid((5, 4, 4))
    cfg = SimConfig(duration=0.1)
    out = material_sweep(grid, cfg=cfg, n=3, seed=5, deltas=(0.0,), parameters=("youngs_modulus",))
    np.testing.assert_array_equal(out[0].result.samples, out[1].result.samples)


def test_sweep_both_materials_and_bad_poisson():
    grid = striped_grid((5, 4, 4))
    seen = []

    def factory(p, c):
        seen.append((p, c))
        return ConstantSim(0.0)

    material_sweep(grid, n=2, target="both", simulator_factory=factory, parameters=("youngs_modulus",))
    assert all(c is None for _, c in seen)
    assert seen[1][0].youngs_modulus == pytest.approx(4.5e6)
    with pytest.raises(ValueError):
        perturbed_props(MaterialProperties(poissons_ratio=0.47), "poissons_ratio", 0.1)
    with pytest.raises(ValueError):
        material_sweep(grid, target="passive")


# ---- slice ablation ----------------------------------------------------------


def test_ablation_row_count_and_empty_slice():
    grid = striped_grid(empty_slices=(4, 9))
    ctrl = sample_controllers(1, interior_size(grid.dims), np.random.default_rng(0))[0]
    rows = slice_ablation(grid, ctrl, PhaseSumSim())
    assert len(rows) == 18 + 1
    assert rows[0].scenario == "baseline" and [r.slice_x for r in rows[1:]] == list(range(1, 19))
    by_x = {r.slice_x: r for r in rows}
    for x in (4, 9):
        assert by_x[x].voxels_ablated == 0
        assert by_x[x].displacement == rows[0].displacement
    assert by_x[5].voxels_ablated == 36
    assert by_x[5].displacement != rows[0].displacement
    assert len(ablation_csv(rows).strip().splitlines()) == 20


def test_ablation_all_zero_phases_is_invariant():
    grid = striped_grid()
    ctrl = PhaseController(0, np.zeros(interior_size(grid.dims)))
    rows = slice_ablation(grid, ctrl, PhaseSumSim())
    assert {r.displacement for r in rows} == {rows[0].displacement}


def test_ablation_disable_mode_with_simulator():
    grid = striped_grid((6, 4, 4), empty_slices=(2,))
    sim = VoxelSimulator(cfg=SimConfig(duration=0.1))
    ctrl = sample_controllers(1, interior_size(grid.dims), np.random.default_rng(1))[0]
    with pytest.warns(UserWarning):
        rows = slice_ablation(grid, ctrl, sim, mode="disable")
    assert len(rows) == 5
    assert rows[2].slice_x == 2 and rows[2].displacement == rows[0].displacement
    assert rows[1].displacement != rows[0].displacement
    with pytest.raises(ValueError):
        slice_ablation(grid, ctrl, sim, mode="remove")


def test_best_controller_picks_first_maximum():
    grid = striped_grid((5, 4, 4))
    ctrls = sample_controllers(6, interior_size(grid.dims), np.random.default_rng(2))
    sim = PhaseSumSim()
    scores = [sim(grid, c.for_grid(grid)) for c in ctrls]
    best, value = best_controller(grid, ctrls, sim)
    assert best.id == int(np.argmax(scores)) and value == max(scores)
