"""The lattice simulator: one body, several controllers, one material change.

Run with ``python3 notebooks/02_simulator.py`` (about half a minute).
"""

# %%
from __future__ import annotations

import numpy as np

from voxevo.harness import interior_size, perturbed_props, sample_controllers
from voxevo.morphogen import Material, VoxelGrid, boundary_mask
from voxevo.voxelsim import MaterialProperties, SimConfig, build_lattice, simulate, trajectory_csv

# %% [markdown]
# A 10x4x4 tube: passive shell, contractile interior in the first half.

# %%
dims = (10, 4, 4)
m = np.full(dims, int(Material.CONTRACTILE), np.int8)
m[boundary_mask(dims)] = Material.PASSIVE
m[5:, 1:-1, 1:-1] = Material.PASSIVE
grid = VoxelGrid(m)
props = MaterialProperties()
cfg = SimConfig(duration=1.0, record_trajectory=True, trajectory_stride=200)

lat = build_lattice(grid, props, cfg)
print(f"{lat.n_nodes} nodes, {lat.n_springs} springs, dt = {lat.stability_bound():.3g} s")

# %% [markdown]
# Equal phases pump the body symmetrically; random phases bend it.

# %%
n = grid.counts().contractile
print("equal phases:", simulate(grid, props, np.zeros(n), cfg).displacement_yz)
controllers = sample_controllers(5, interior_size(dims), np.random.default_rng(0))
for c in controllers:
    out = simulate(grid, props, c.for_grid(grid), cfg)
    print(f"controller {c.id}: {out.displacement_yz:.4f} voxel lengths")

# %%
print(trajectory_csv(simulate(grid, props, controllers[0].for_grid(grid), cfg)))

# %% [markdown]
# A softer contractile material (Young's modulus -10 %) under the same controller.

# %%
soft = perturbed_props(props, "youngs_modulus", -0.10)
phases = controllers[0].for_grid(grid)
print("baseline:", simulate(grid, props, phases, cfg).displacement_yz)
print("softer  :", simulate(grid, props, phases, cfg, contractile_props=soft).displacement_yz)
