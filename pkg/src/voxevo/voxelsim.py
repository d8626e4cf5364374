"""Mass-spring lattice simulator for voxel actuators.

Each present voxel puts a point mass on its eight corners and springs on its
12 edges, 12 face diagonals and 4 body diagonals. Springs shared by
neighbouring voxels are merged: their stiffness is the sum of the voxel
contributions and their rest length is the stiffness-weighted mean of the
contributing voxels' (possibly actuated) rest lengths. Contractile voxels
scale their rest lengths by ``(1 + A sin(2 pi f t + phase)) ** (1/3)`` so the
voxel volume oscillates by +-A.

The x = 0 end face is clamped; the free tip is the centroid of the nodes on
the opposite end face. Integration is semi-implicit (symplectic) Euler with
per-spring dashpots.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations, product

import numba
import numpy as np

from voxevo.morphogen import Material, VoxelGrid

STABILITY_FACTOR = 0.1


class EmptyBodyError(ValueError):
    """Raised when a grid has no voxels to simulate."""


@dataclass(frozen=True)
class MaterialProperties:
    youngs_modulus: float = 5e6  # Pa
    poissons_ratio: float = 0.35
    static_friction: float = 1.0
    dynamic_friction: float = 0.5
    density: float = 1e6  # kg/m^3
    actuation_amplitude: float = 0.5  # fraction of rest volume
    actuation_frequency: float = 4.0  # Hz

    def __post_init__(self):
        if not 0.0 < self.poissons_ratio < 0.5:
            raise ValueError(f"Poisson's ratio must lie in (0, 0.5), got {self.poissons_ratio}")
        if self.youngs_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if not 0.0 <= self.actuation_amplitude < 1.0:
            raise ValueError("actuation amplitude must lie in [0, 1)")

    @property
    def edge_stiffness_per_length(self) -> float:
        return self.youngs_modulus

    @property
    def diagonal_ratio(self) -> float:
        nu = self.poissons_ratio
        return nu / (1.0 - nu)


@dataclass(frozen=True)
class SimConfig:
    voxel_edge_length: float = 0.01  # m
    duration: float = 2.0  # s
    timestep: float | None = None  # None -> stability bound
    damping_ratio: float = 0.1
    gravity: bool = False
    record_trajectory: bool = False
    trajectory_stride: int = 100
    motion_constraint: str = "none"  # or "yz-plane"
    fix_end: bool = True

    def __post_init__(self):
        if self.voxel_edge_length <= 0 or self.duration < 0:
            raise ValueError("edge length must be positive and duration non-negative")
        if self.damping_ratio < 0:
            raise ValueError("damping ratio must be non-negative")
        if self.motion_constraint not in ("none", "yz-plane"):
            raise ValueError("motion_constraint must be 'none' or 'yz-plane'")
        if self.trajectory_stride < 1:
            raise ValueError("trajectory stride must be >= 1")


# corner offsets of a unit cube and its 28 springs grouped by kind
_CORNERS = np.array(list(product((0, 1), repeat=3)), dtype=np.int64)
_PAIRS = {1: [], 2: [], 3: []}
for _a, _b in combinations(range(8), 2):
    _PAIRS[int(np.abs(_CORNERS[_a] - _CORNERS[_b]).sum())].append((_a, _b))
# per-voxel share of each merged spring: edges belong to 4 voxels in a solid,
# face diagonals to 2, body diagonals to 1
_SHARE = {1: 0.25, 2: 0.5, 3: 1.0}


@dataclass(frozen=True, eq=False)
class Lattice:
    """Static description of a body plus its current state.

    ``act_ptr/act_idx/act_w`` is a CSR map from spring to the contractile
    voxels (in x-major scan order) contributing to it, weighted by their
    share of the spring's stiffness; ``passive_frac`` is the rest.
    """

    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    fixed: np.ndarray
    springs: np.ndarray  # (s, 2) node indices
    stiffness: np.ndarray
    rest_length: np.ndarray
    damping: np.ndarray
    passive_frac: np.ndarray
    act_ptr: np.ndarray
    act_idx: np.ndarray
    act_w: np.ndarray
    tip_nodes: np.ndarray
    node_index: np.ndarray  # (n, 3) integer lattice coordinates
    n_contractile: int
    voxel_count: int
    edge_length: float
    time: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.masses)

    @property
    def n_springs(self) -> int:
        return len(self.stiffness)

    def stability_bound(self) -> float:
        """``0.1 * sqrt(m_min / k_max)``."""
        return STABILITY_FACTOR * float(np.sqrt(self.masses.min() / self.stiffness.max()))

    def tip(self) -> np.ndarray:
        return self.positions[self.tip_nodes].mean(axis=0)

    def with_state(self, positions, velocities, time) -> Lattice:
        return replace(self, positions=positions, velocities=velocities, time=time)

    def kinetic_energy(self) -> float:
        return float(0.5 * (self.masses[:, None] * self.velocities**2).sum())

    def potential_energy(self, rest_length=None) -> float:
        rest = self.rest_length if rest_length is None else rest_length
        d = self.positions[self.springs[:, 1]] - self.positions[self.springs[:, 0]]
        stretch = np.linalg.norm(d, axis=1) - rest
        return float(0.5 * (self.stiffness * stretch**2).sum())


def lattice_from_springs(positions, masses, springs, stiffness, fixed=None, damping=None) -> Lattice:
    """Passive lattice from explicit nodes and springs (rest lengths = current lengths)."""
    positions = np.asarray(positions, dtype=float)
    masses = np.asarray(masses, dtype=float)
    springs = np.asarray(springs, dtype=np.int64).reshape(-1, 2)
    stiffness = np.asarray(stiffness, dtype=float)
    rest = np.linalg.norm(positions[springs[:, 1]] - positions[springs[:, 0]], axis=1)
    n = len(masses)
    return Lattice(
        positions=positions.copy(),
        velocities=np.zeros_like(positions),
        masses=masses,
        fixed=np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool),
        springs=springs,
        stiffness=stiffness,
        rest_length=rest,
        damping=np.zeros(len(stiffness)) if damping is None else np.asarray(damping, dtype=float),
        passive_frac=np.ones(len(stiffness)),
        act_ptr=np.zeros(len(stiffness) + 1, dtype=np.int64),
        act_idx=np.zeros(0, dtype=np.int64),
        act_w=np.zeros(0),
        tip_nodes=np.array([n - 1], dtype=np.int64),
        node_index=np.zeros((n, 3), dtype=np.int64),
        n_contractile=0,
        voxel_count=0,
        edge_length=1.0,
    )


def build_lattice(
    grid: VoxelGrid,
    props: MaterialProperties,
    cfg: SimConfig,
    contractile_props: MaterialProperties | None = None,
) -> Lattice:
    """Discretize ``grid`` into nodes and merged springs.

    ``contractile_props`` overrides the elastic constants and density of
    contractile voxels; by default both materials share ``props``.
    """
    mats = grid.materials
    cells = np.argwhere(mats != Material.EMPTY)
    if len(cells) == 0:
        raise EmptyBodyError("grid has no present voxels")
    L = cfg.voxel_edge_length
    X, Y, Z = grid.dims
    NY, NZ = Y + 1, Z + 1

    def node_id(p):
        return (p[..., 0] * NY + p[..., 1]) * NZ + p[..., 2]

    corners = cells[:, None, :] + _CORNERS[None, :, :]  # (v, 8, 3)
    corner_ids = node_id(corners)
    used, compact = np.unique(corner_ids, return_inverse=True)
    compact = compact.reshape(corner_ids.shape)
    n = len(used)

    cprops = props if contractile_props is None else contractile_props
    is_contractile = mats[tuple(cells.T)] == Material.CONTRACTILE
    density = np.where(is_contractile, cprops.density, props.density)
    masses = np.bincount(compact.ravel(), weights=np.repeat(density * L**3 / 8.0, 8), minlength=n)
    node_index = np.stack([used // (NY * NZ), (used // NZ) % NY, used % NZ], axis=1)
    positions = node_index.astype(float) * L

    # contractile voxels are numbered in x-major scan order, which argwhere gives
    contractile_rank = np.cumsum(is_contractile) - 1

    k_edge = np.where(
        is_contractile, cprops.edge_stiffness_per_length, props.edge_stiffness_per_length
    ) * L
    k_diag = k_edge * np.where(is_contractile, cprops.diagonal_ratio, props.diagonal_ratio)
    keys, ks, rests, owners = [], [], [], []
    for kind, pairs in _PAIRS.items():
        base_k = (k_edge if kind == 1 else k_diag) * _SHARE[kind]
        for a, b in pairs:
            ia, ib = compact[:, a], compact[:, b]
            lo, hi = np.minimum(ia, ib), np.maximum(ia, ib)
            keys.append(lo * n + hi)
            ks.append(base_k)
            rests.append(np.full(len(cells), L * np.sqrt(kind)))
            owners.append(np.arange(len(cells)))
    keys = np.concatenate(keys)
    ks = np.concatenate(ks)
    rests = np.concatenate(rests)
    owners = np.concatenate(owners)

    uniq, spring_of = np.unique(keys, return_inverse=True)
    n_springs = len(uniq)
    springs = np.stack([uniq // n, uniq % n], axis=1)
    stiffness = np.bincount(spring_of, weights=ks, minlength=n_springs)
    rest_length = np.zeros(n_springs)
    rest_length[spring_of] = rests

    share = ks / stiffness[spring_of]
    act = is_contractile[owners]
    passive_frac = 1.0 - np.bincount(spring_of[act], weights=share[act], minlength=n_springs)
    passive_frac = np.clip(passive_frac, 0.0, 1.0)
    order = np.lexsort((contractile_rank[owners[act]], spring_of[act]))
    act_spring = spring_of[act][order]
    act_idx = contractile_rank[owners[act]][order].astype(np.int64)
    act_w = share[act][order]
    act_ptr = np.zeros(n_springs + 1, dtype=np.int64)
    np.cumsum(np.bincount(act_spring, minlength=n_springs), out=act_ptr[1:])

    mi, mj = masses[springs[:, 0]], masses[springs[:, 1]]
    reduced = mi * mj / (mi + mj)
    damping = 2.0 * cfg.damping_ratio * np.sqrt(stiffness * reduced)

    fixed = node_index[:, 0] == 0 if cfg.fix_end else np.zeros(n, dtype=bool)
    tip_nodes = np.flatnonzero(node_index[:, 0] == node_index[:, 0].max())

    return Lattice(
        positions=positions,
        velocities=np.zeros_like(positions),
        masses=masses,
        fixed=fixed,
        springs=springs.astype(np.int64),
        stiffness=stiffness,
        rest_length=rest_length,
        damping=damping,
        passive_frac=passive_frac,
        act_ptr=act_ptr,
        act_idx=act_idx,
        act_w=act_w,
        tip_nodes=tip_nodes.astype(np.int64),
        node_index=node_index,
        n_contractile=int(is_contractile.sum()),
        voxel_count=len(cells),
        edge_length=L,
    )


def rest_scale(t: float, phase: float, props: MaterialProperties) -> float:
    """Edge-length multiplier of a contractile voxel at time ``t``."""
    return float(
        np.cbrt(1.0 + props.actuation_amplitude * np.sin(2.0 * np.pi * props.actuation_frequency * t + phase))
    )


# no nnan/ninf: divergence detection relies on NaN comparisons
_FAST = {"contract", "arcp", "nsz", "afn"}


@numba.njit(cache=True, fastmath=_FAST)
def _integrate(
    pos, vel, inv_mass, free_idx, si, sj, k, rest0, damp,
    act_s, act_base, act_ptr, act_idx, act_w,
    phases, omega, amp, t0, dt, nsteps, gz, lock_x,
    tip_nodes, stride, traj, blowup,
):  # fmt: skip
    n = pos.shape[0]
    ns = si.shape[0]
    nc = phases.shape[0]
    na = act_s.shape[0]
    scale = np.empty(nc)
    force = np.empty((n, 3))
    rest = rest0.copy()
    start = pos.copy()
    rec = 0
    for step in range(nsteps):
        t = t0 + step * dt
        for c in range(nc):
            scale[c] = np.cbrt(1.0 + amp[c] * np.sin(omega * t + phases[c]))
        for q in range(na):
            f = act_base[q]
            for r in range(act_ptr[q], act_ptr[q + 1]):
                f += act_w[r] * scale[act_idx[r]]
            s = act_s[q]
            rest[s] = rest0[s] * f
        for i in range(n):
            force[i, 0] = 0.0
            force[i, 1] = 0.0
            force[i, 2] = 0.0
        for s in range(ns):
            a = si[s]
            b = sj[s]
            dx = pos[b, 0] - pos[a, 0]
            dy = pos[b, 1] - pos[a, 1]
            dz = pos[b, 2] - pos[a, 2]
            length = np.sqrt(dx * dx + dy * dy + dz * dz)
            inv_len = 1.0 / length
            rv = ((vel[b, 0] - vel[a, 0]) * dx + (vel[b, 1] - vel[a, 1]) * dy + (vel[b, 2] - vel[a, 2]) * dz) * inv_len
            mag = (k[s] * (length - rest[s]) + damp[s] * rv) * inv_len
            fx = mag * dx
            fy = mag * dy
            fz = mag * dz
            force[a, 0] += fx
            force[a, 1] += fy
            force[a, 2] += fz
            force[b, 0] -= fx
            force[b, 1] -= fy
            force[b, 2] -= fz
        for q in range(free_idx.shape[0]):
            i = free_idx[q]
            im = inv_mass[i]
            vel[i, 0] += dt * force[i, 0] * im
            vel[i, 1] += dt * force[i, 1] * im
            vel[i, 2] += dt * (force[i, 2] * im + gz)
            if lock_x:
                vel[i, 0] = 0.0
            pos[i, 0] += dt * vel[i, 0]
            pos[i, 1] += dt * vel[i, 1]
            pos[i, 2] += dt * vel[i, 2]
        if step % 64 == 63 or step == nsteps - 1:
            for q in range(free_idx.shape[0]):
                i = free_idx[q]
                for d in range(3):
                    if not (abs(pos[i, d] - start[i, d]) < blowup):
                        return step + 1
        if stride > 0 and (step + 1) % stride == 0 and rec < traj.shape[0]:
            tx = 0.0
            ty = 0.0
            tz = 0.0
            for q in range(tip_nodes.shape[0]):
                tx += pos[tip_nodes[q], 0]
                ty += pos[tip_nodes[q], 1]
                tz += pos[tip_nodes[q], 2]
            m = tip_nodes.shape[0]
            traj[rec, 0] = t + dt
            traj[rec, 1] = tx / m
            traj[rec, 2] = ty / m
            traj[rec, 3] = tz / m
            rec += 1
    return 0


def _phases_for(lattice: Lattice, controller) -> np.ndarray:
    phases = getattr(controller, "phases", controller)
    phases = np.zeros(0) if phases is None else np.asarray(phases, dtype=float).ravel()
    if len(phases) < lattice.n_contractile:
        raise ValueError(
            f"controller has {len(phases)} phases but the body has {lattice.n_contractile} contractile voxels"
        )
    return np.ascontiguousarray(phases[: lattice.n_contractile])


def _amplitudes_for(lattice: Lattice, props: MaterialProperties, amplitudes) -> np.ndarray:
    if amplitudes is None:
        return np.full(lattice.n_contractile, props.actuation_amplitude)
    amp = np.asarray(amplitudes, dtype=float).ravel()
    if len(amp) != lattice.n_contractile:
        raise ValueError(f"expected {lattice.n_contractile} amplitudes, got {len(amp)}")
    if np.any(amp < 0) or np.any(amp >= 1):
        raise ValueError("actuation amplitudes must lie in [0, 1)")
    return np.ascontiguousarray(amp)


def resolve_timestep(lattice: Lattice, cfg: SimConfig) -> float:
    bound = lattice.stability_bound()
    if cfg.timestep is None:
        return bound
    if cfg.timestep > bound * (1 + 1e-12):
        raise ValueError(f"timestep {cfg.timestep:g} exceeds the stability bound {bound:g}")
    return cfg.timestep


def run(
    lattice: Lattice,
    controller,
    props: MaterialProperties,
    cfg: SimConfig,
    nsteps: int,
    dt: float,
    trajectory: np.ndarray | None = None,
    amplitudes=None,
) -> tuple[Lattice, int]:
    """Advance ``lattice`` by ``nsteps`` steps.

    ``amplitudes`` optionally gives one actuation amplitude per contractile
    voxel (0 switches a voxel off); it defaults to ``props.actuation_amplitude``.

    Returns:
        (new lattice state, step at which the body diverged or 0)
    """
    phases = _phases_for(lattice, controller)
    amp = _amplitudes_for(lattice, props, amplitudes)
    pos = lattice.positions.copy()
    vel = lattice.velocities.copy()
    inv_mass = np.where(lattice.fixed, 0.0, 1.0 / lattice.masses)
    if trajectory is None:
        trajectory = np.zeros((0, 4))
        stride = 0
    else:
        stride = cfg.trajectory_stride
    counts = np.diff(lattice.act_ptr)
    act_s = np.flatnonzero(counts > 0)
    act_ptr = np.concatenate([[0], np.cumsum(counts[act_s])]).astype(np.int64)
    bad = _integrate(
        pos, vel, inv_mass, np.flatnonzero(~lattice.fixed),
        np.ascontiguousarray(lattice.springs[:, 0]), np.ascontiguousarray(lattice.springs[:, 1]),
        lattice.stiffness, lattice.rest_length, lattice.damping,
        act_s, lattice.passive_frac[act_s], act_ptr, lattice.act_idx, lattice.act_w,
        phases, 2.0 * np.pi * props.actuation_frequency, amp,
        lattice.time, dt, int(nsteps), -9.81 if cfg.gravity else 0.0,
        cfg.motion_constraint == "yz-plane",
        lattice.tip_nodes, stride, trajectory, 1e6 * lattice.edge_length,
    )  # fmt: skip
    return lattice.with_state(pos, vel, lattice.time + nsteps * dt), int(bad)


def step(lattice: Lattice, controller, props: MaterialProperties, cfg: SimConfig, dt: float | None = None) -> Lattice:
    """One semi-implicit Euler step from ``lattice.time``.

    Raises:
        FloatingPointError: if any coordinate became non-finite.
    """
    dt = resolve_timestep(lattice, cfg) if dt is None else dt
    new, bad = run(lattice, controller, props, cfg, 1, dt)
    if bad:
        raise FloatingPointError("simulation diverged")
    return new


@dataclass
class SimOutcome:
    tip_initial: np.ndarray
    tip_final: np.ndarray
    displacement_yz: float  # in voxel edge lengths
    voxel_count: int
    diverged: bool = False
    trajectory: np.ndarray | None = field(default=None, repr=False)

    @property
    def stability(self) -> str:
        return "diverged" if self.diverged else "ok"


def simulate_lattice(
    lattice: Lattice, controller, props: MaterialProperties, cfg: SimConfig, amplitudes=None
) -> SimOutcome:
    dt = resolve_timestep(lattice, cfg)
    nsteps = int(round(cfg.duration / dt))
    traj = None
    if cfg.record_trajectory:
        traj = np.full((nsteps // cfg.trajectory_stride, 4), np.nan)
    tip0 = lattice.tip()
    final, bad = run(lattice, controller, props, cfg, nsteps, dt, traj, amplitudes)
    if bad:
        return SimOutcome(tip0, final.tip(), 0.0, lattice.voxel_count, True, traj)
    tip1 = final.tip()
    disp = float(np.hypot(tip1[1] - tip0[1], tip1[2] - tip0[2]) / lattice.edge_length)
    if not np.isfinite(disp):
        return SimOutcome(tip0, tip1, 0.0, lattice.voxel_count, True, traj)
    return SimOutcome(tip0, tip1, disp, lattice.voxel_count, False, traj)


def simulate(
    grid: VoxelGrid,
    props: MaterialProperties,
    controller,
    cfg: SimConfig,
    contractile_props: MaterialProperties | None = None,
    amplitudes=None,
) -> SimOutcome:
    """Run ``grid`` for ``cfg.duration`` seconds driven by ``controller``.

    Args:
        props: material of passive voxels, and of contractile ones unless
            ``contractile_props`` is given.
        controller: a phase vector (or anything with ``.phases``) with at
            least one entry per contractile voxel, in x-major scan order;
            extra entries are ignored.
        contractile_props: separate material (including actuation
            parameters) for contractile voxels.
        amplitudes: per-contractile-voxel actuation amplitudes.
    """
    act = props if contractile_props is None else contractile_props
    lattice = build_lattice(grid, props, cfg, contractile_props)
    return simulate_lattice(lattice, controller, act, cfg, amplitudes)


def phases_from_field(grid: VoxelGrid, phase_field: np.ndarray) -> np.ndarray:
    """Per-contractile-voxel phases read off a dense ``(X, Y, Z)`` phase array."""
    cells = grid.contractile_cells()
    return np.asarray(phase_field, dtype=float)[tuple(cells.T)]


def trajectory_csv(outcome: SimOutcome) -> str:
    lines = ["t,tip_x,tip_y,tip_z"]
    if outcome.trajectory is not None:
        for row in outcome.trajectory:
            if np.isfinite(row[0]):
                lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"
