"""Command-line entry point: ``voxevo <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from voxevo.harness import (
    ALGORITHMS,
    RunConfig,
    VoxelSimulator,
    WorkerPool,
    ablation_csv,
    best_controller,
    evolve,
    interior_size,
    material_sweep,
    read_controllers,
    robustness,
    sample_controllers,
    slice_ablation,
    stream_rng,
    substrate_sweep,
    sweep_csv,
)
from voxevo.morphogen import dump_morphology_bytes, dumps_mesh, dumps_morphology, read_morphology
from voxevo.voxelsim import MaterialProperties, SimConfig


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims look like X,Y,Z")
    return tuple(int(p) for p in parts)


def _range(text: str) -> range:
    lo, sep, hi = text.partition("..")
    if not sep:
        return range(int(lo), int(lo) + 1)
    return range(int(lo), int(hi) + 1)


def _add_material(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("material and simulation")
    g.add_argument("--youngs", type=float, help="Young's modulus, Pa")
    g.add_argument("--poisson", type=float, help="Poisson's ratio")
    g.add_argument("--density", type=float, help="kg/m^3")
    g.add_argument("--duration", type=float, help="simulated seconds per evaluation")
    g.add_argument("--dt", type=float, help="timestep (default: stability bound)")
    g.add_argument("--edge-length", type=float, help="voxel edge, m")
    g.add_argument("--gravity", action="store_true", default=None)
    g.add_argument("--workers", type=int, default=None)


def _material(args, base: MaterialProperties | None = None, sim: SimConfig | None = None):
    props = MaterialProperties() if base is None else base
    sim = SimConfig() if sim is None else sim
    pchg = {k: v for k, v in (("youngs_modulus", args.youngs), ("poissons_ratio", args.poisson), ("density", args.density)) if v is not None}
    schg = {
        k: v
        for k, v in (
            ("duration", args.duration),
            ("timestep", args.dt),
            ("voxel_edge_length", args.edge_length),
            ("gravity", args.gravity),
        )
        if v is not None
    }
    return dataclasses.replace(props, **pchg), dataclasses.replace(sim, **schg)


def _run_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    props, sim = _material(args, base.props, base.sim)
    changes = {
        "algorithm": args.algo,
        "seed": args.seed,
        "population_size": args.pop,
        "generations": args.gens,
        "controllers": args.controllers,
        "dims": args.dims,
        "out_dir": args.out,
        "run_id": args.run_id,
        "workers": args.workers,
        "interior_passive": args.interior_passive,
    }
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(base, props=props, sim=sim, **changes)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--algo", choices=ALGORITHMS)
    p.add_argument("--seed", type=int)
    p.add_argument("--pop", type=int)
    p.add_argument("--gens", type=int)
    p.add_argument("--controllers", type=int)
    p.add_argument("--dims", type=_dims)
    p.add_argument("--out")
    p.add_argument("--run-id")
    p.add_argument("--interior-passive", choices=("allow", "forbid"))
    _add_material(p)


def _print_gen(row: dict) -> None:
    print(f"gen {row['generation']:5d}  best {row['best']:.6f}  mean {row['mean']:.6f}  best-so-far {row['best_so_far']:.6f}", flush=True)


def cmd_evolve(args) -> int:
    cfg = _run_config(args)
    res = evolve(cfg, resume=args.resume, stop_after=args.stop_after, progress=None if args.quiet else _print_gen)
    print(f"best aptitude {res.best_aptitude!r} after {res.generations} generations -> {res.out_dir}")
    return 0


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_robustness(args) -> int:
    grid = read_morphology(args.morphology)
    props, sim = _material(args)
    with WorkerPool(args.workers or 1) as pool:
        res = robustness(grid, args.n, stream_rng(args.seed, "robustness"), VoxelSimulator(props, sim), pool)
    out = _out_dir(args)
    (out / "robustness.csv").write_text(res.to_csv())
    (out / "robustness_summary.json").write_text(json.dumps(res.summary(), indent=2) + "\n")
    print(json.dumps(res.summary()))
    return 0


def cmd_sweep_material(args) -> int:
    grid = read_morphology(args.morphology)
    props, sim = _material(args)
    with WorkerPool(args.workers or 1) as pool:
        scenarios = material_sweep(grid, props, sim, args.seed, args.n, target=args.target, pool=pool)
    out = _out_dir(args)
    (out / "material_sweep.csv").write_text(sweep_csv(scenarios))
    summary = [{"scenario": s.name, "parameter": s.parameter, "delta": s.delta, "value": s.value, **s.result.summary()} for s in scenarios]
    (out / "material_sweep_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    for s in summary:
        print(f"{s['scenario']:>22s}  mean {s['mean']:.6f}  median {s['median']:.6f}")
    return 0


def cmd_ablate_slices(args) -> int:
    grid = read_morphology(args.morphology)
    props, sim = _material(args)
    simulator = VoxelSimulator(props, sim)
    if args.controllers_file:
        candidates = read_controllers(args.controllers_file)
    else:
        rng = stream_rng(args.seed, "controllers")
        candidates = sample_controllers(args.candidates, interior_size(grid.dims), rng)
    with WorkerPool(args.workers or 1) as pool:
        base, _ = best_controller(grid, candidates, simulator, pool)
        rows = slice_ablation(grid, base, simulator, args.mode, pool)
    out = _out_dir(args)
    (out / "slice_ablation.csv").write_text(ablation_csv(rows))
    for r in rows:
        print(f"{r.scenario:>9s}  ablated {r.voxels_ablated:4d}  displacement {r.displacement:.6f}")
    return 0


def cmd_export(args) -> int:
    grid = read_morphology(args.morphology, check_enclosure=False)
    if args.format == "text":
        data: str | bytes = dumps_morphology(grid)
    elif args.format == "mesh":
        data = dumps_mesh(grid, args.edge_length)
    else:
        data = dump_morphology_bytes(grid)
    if args.out is None:
        if isinstance(data, bytes):
            sys.stdout.buffer.write(data)
        else:
            sys.stdout.write(data)
    elif isinstance(data, bytes):
        Path(args.out).write_bytes(data)
    else:
        Path(args.out).write_text(data)
    return 0


def cmd_substrate_sweep(args) -> int:
    cfg = dataclasses.replace(_run_config(args), algorithm="hyperneat")
    rows = substrate_sweep(
        cfg,
        args.hidden_range,
        args.width_range,
        progress=lambda r: print(f"hidden {r['hidden_layers']} width {r['width']}  best {r['best_aptitude']:.6f}", flush=True),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["hidden_layers,width,best_aptitude"] + [f"{r['hidden_layers']},{r['width']},{r['best_aptitude']!r}" for r in rows]
    (out / "substrate_sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxevo", description="Evolve and analyse voxel soft actuators.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run AFPO, NEAT or HyperNEAT")
    _add_run_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.add_argument("--stop-after", type=int, help="stop after logging this generation")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("robustness", help="displacement over fresh random controllers")
    p.add_argument("--morphology", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    _add_material(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("sweep-material", help="robustness under +-5/10 %% material changes")
    p.add_argument("--morphology", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", choices=("contractile", "both"), default="contractile")
    p.add_argument("--out", default=".")
    _add_material(p)
    p.set_defaults(func=cmd_sweep_material)

    p = sub.add_parser("ablate-slices", help="switch off one x-slice of actuation at a time")
    p.add_argument("--morphology", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidates", type=int, default=25, help="controllers to pick the base one from")
    p.add_argument("--controllers-file", help="controllers.csv of a run (overrides --candidates)")
    p.add_argument("--mode", choices=("zero-phase", "disable"), default="zero-phase")
    p.add_argument("--out", default=".")
    _add_material(p)
    p.set_defaults(func=cmd_ablate_slices)

    p = sub.add_parser("export", help="convert a morphology file")
    p.add_argument("--morphology", required=True)
    p.add_argument("--format", choices=("text", "mesh", "binary"), default="text")
    p.add_argument("--edge-length", type=float, default=1.0, help="mesh scale")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("substrate-sweep", help="HyperNEAT over a grid of substrate shapes")
    _add_run_flags(p)
    p.add_argument("--hidden-range", type=_range, default=range(1, 6))
    p.add_argument("--width-range", type=_range, default=range(1, 6))
    p.set_defaults(func=cmd_substrate_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"voxevo: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
