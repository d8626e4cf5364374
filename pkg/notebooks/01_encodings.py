"""Generative encodings: from a CPPN genome to a voxel body.

Run with ``python3 notebooks/01_encodings.py``. Cells are marked ``# %%`` so
the file also opens as a notebook in editors that understand that format.
"""

# %%
from __future__ import annotations

import numpy as np

from voxevo.cppn import CppnConfig, random_genome
from voxevo.hyperneat import SubstrateSpec, build_network, substrate_cppn_config
from voxevo.morphogen import dumps_morphology, generate_from_cppn, generate_from_substrate
from voxevo.neat import InnovationLedger, NeatConfig, mutate

rng = np.random.default_rng(7)

# %% [markdown]
# A direct CPPN takes normalized (x, y, z) plus a bias input and returns two
# outputs: presence ``v`` and material ``m``. Mutation grows its topology.

# %%
cfg = NeatConfig()
ledger = InnovationLedger.for_config(cfg.cppn)
genome = random_genome(CppnConfig(), rng)
for _ in range(20):
    genome = mutate(genome, cfg, ledger, rng)
print(f"{len(genome.hidden_ids)} hidden nodes, {sum(c.enabled for c in genome.connections)} enabled links")

# %% [markdown]
# Querying every interior cell gives a body. The boundary shell is always
# passive, so only the interior is designable.

# %%
grid = generate_from_cppn(genome)
print("total / passive / contractile:", tuple(grid.counts()))
print("contractile voxels per x-slice:", (grid.materials == 3).sum(axis=(1, 2)).tolist())

# %% [markdown]
# HyperNEAT uses a CPPN with four coordinate inputs to paint the weights of
# a fixed substrate network, which is then queried per cell.

# %%
spec = SubstrateSpec.grid(hidden_layers=2, width=5)
hyper = random_genome(substrate_cppn_config(spec), rng)
net = build_network(hyper, spec)
print("expressed substrate links:", net.n_connections)
body = generate_from_substrate(net)
print("substrate body counts:", tuple(body.counts()))

# %%
print(dumps_morphology(generate_from_cppn(genome, (5, 4, 4))))
