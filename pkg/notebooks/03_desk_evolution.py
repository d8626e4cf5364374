"""A miniature evolution run followed by the post-hoc studies.

Run with ``python3 notebooks/03_desk_evolution.py``. The settings are far
smaller than a real run so the script finishes in a few minutes.
"""

# %%
from __future__ import annotations

import tempfile
import warnings
from pathlib import Path

import numpy as np

from voxevo.harness import (
    RunConfig,
    VoxelSimulator,
    best_controller,
    evolve,
    random_baseline,
    read_controllers,
    robustness,
    slice_ablation,
    stream_rng,
)
from voxevo.voxelsim import SimConfig

out = Path(tempfile.mkdtemp(prefix="voxevo-"))
cfg = RunConfig(
    algorithm="afpo",
    seed=1,
    population_size=8,
    generations=5,
    controllers=3,
    dims=(8, 4, 4),
    sim=SimConfig(duration=0.5),
    out_dir=str(out / "afpo"),
)

# %%
res = evolve(cfg, progress=lambda r: print(f"gen {r['generation']}: best {r['best']:.4f}"))
print("best body:", tuple(res.best_morphology.counts()))
print("random genomes:", float(np.mean(random_baseline(cfg, 10))))

# %% [markdown]
# Robustness: the best body under fresh random controllers.

# %%
sim = VoxelSimulator(cfg.props, cfg.sim)
rob = robustness(res.best_morphology, 40, stream_rng(cfg.seed, "robustness"), sim)
print(rob.summary())

# %% [markdown]
# Slice ablation with the best of the run's own controllers.

# %%
controllers = read_controllers(Path(cfg.out_dir) / "controllers.csv")
base, value = best_controller(res.best_morphology, controllers, sim)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # the x size is not the default 20
    for row in slice_ablation(res.best_morphology, base, sim):
        print(f"{row.scenario:>9s} ablated {row.voxels_ablated:3d}  {row.displacement:.4f}")
