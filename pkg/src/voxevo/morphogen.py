"""From networks to voxel morphologies.

The design space is a dense ``(X, Y, Z)`` box, 20 x 8 x 8 by default. Every
boundary cell is forced to be present and passive (the enclosure); the
network decides the interior. Arrays are indexed ``[x, y, z]`` and flattened
in C order, so x is the slowest index ("x-major").
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from voxevo.cppn import CppnGenome, evaluate
from voxevo.hyperneat import SubstrateNetwork, query_substrate

DEFAULT_DIMS = (20, 8, 8)
PRESENCE_THRESHOLD = 0.5
MATERIAL_THRESHOLD = 0.5


class Material(enum.IntEnum):
    EMPTY = 0
    PASSIVE = 1
    CONTRACTILE = 3


class InvalidDimsError(ValueError):
    pass


class MorphologyFormatError(ValueError):
    pass


class VoxelCounts(NamedTuple):
    total: int
    passive: int
    contractile: int


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 3:
        raise InvalidDimsError(f"every dimension must be >= 3, got {dims}")
    return dims


def boundary_mask(dims) -> np.ndarray:
    X, Y, Z = _check_dims(dims)
    mask = np.zeros((X, Y, Z), dtype=bool)
    mask[[0, -1], :, :] = True
    mask[:, [0, -1], :] = True
    mask[:, :, [0, -1]] = True
    return mask


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Dense material lattice, codes from :class:`Material`."""

    materials: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.materials, dtype=np.int8)
        if m.ndim != 3:
            raise InvalidDimsError("materials must be a 3-D array")
        bad = ~np.isin(m, [int(c) for c in Material])
        if bad.any():
            raise MorphologyFormatError(f"unknown material code {int(m[bad][0])}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "materials", m)

    def __eq__(self, other):
        return isinstance(other, VoxelGrid) and np.array_equal(self.materials, other.materials)

    __hash__ = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.materials.shape)

    @property
    def present(self) -> np.ndarray:
        return self.materials != Material.EMPTY

    @property
    def enclosure(self) -> np.ndarray:
        """Per-cell flag: True on the boundary shell."""
        return boundary_mask(self.dims)

    def has_enclosure(self) -> bool:
        return bool(np.all(self.materials[self.enclosure] == Material.PASSIVE))

    def contractile_cells(self) -> np.ndarray:
        """(n, 3) indices of contractile cells in x-major scan order."""
        return np.argwhere(self.materials == Material.CONTRACTILE)

    def counts(self) -> VoxelCounts:
        return count_voxels(self)

    def mirror(self, axis: int) -> VoxelGrid:
        return VoxelGrid(np.flip(self.materials, axis=axis))


def count_voxels(grid: VoxelGrid) -> VoxelCounts:
    m = grid.materials
    passive = int(np.count_nonzero(m == Material.PASSIVE))
    contractile = int(np.count_nonzero(m == Material.CONTRACTILE))
    return VoxelCounts(passive + contractile, passive, contractile)


def passive_enclosure_count(dims) -> int:
    """Number of cells in the one-voxel boundary shell of a box."""
    X, Y, Z = _check_dims(dims)
    return X * Y * Z - (X - 2) * (Y - 2) * (Z - 2)


def normalized_coordinates(dims) -> np.ndarray:
    """Cell centres mapped to [-1, 1] per axis, shape ``(X, Y, Z, 3)``.

    Index i along an axis of length n maps to ``2 i / (n - 1) - 1``.
    """
    axes = [2.0 * np.arange(n) / (n - 1) - 1.0 for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def materials_from_outputs(v, m, interior_passive: str = "allow") -> np.ndarray:
    """Presence/material thresholds applied to raw network outputs.

    Present iff ``|v| >= 0.5``; a present cell is passive iff ``|m| < 0.5``,
    otherwise contractile. With ``interior_passive="forbid"`` cells that would
    be passive are left empty instead.
    """
    v = np.asarray(v, dtype=float)
    m = np.asarray(m, dtype=float)
    present = np.abs(v) >= PRESENCE_THRESHOLD
    passive = np.abs(m) < MATERIAL_THRESHOLD
    if interior_passive == "allow":
        fill_passive = Material.PASSIVE
    elif interior_passive == "forbid":
        fill_passive = Material.EMPTY
    else:
        raise ValueError(f"interior_passive must be 'allow' or 'forbid', not {interior_passive!r}")
    out = np.where(passive, fill_passive, Material.CONTRACTILE)
    return np.where(present, out, Material.EMPTY).astype(np.int8)


def prune_floating(materials: np.ndarray) -> np.ndarray:
    """Empty every present component not 6-connected to the boundary shell."""
    present = materials != Material.EMPTY
    labels, _ = ndimage.label(present)
    shell = boundary_mask(materials.shape)
    anchored = np.unique(labels[shell & present])
    keep = np.isin(labels, anchored[anchored > 0])
    return np.where(keep, materials, Material.EMPTY).astype(np.int8)


def _assemble(v: np.ndarray, m: np.ndarray, dims, prune: bool, interior_passive: str) -> VoxelGrid:
    mats = materials_from_outputs(v, m, interior_passive)
    mats[boundary_mask(dims)] = Material.PASSIVE
    if prune:
        mats = prune_floating(mats)
    return VoxelGrid(mats)


def _interior_query(dims, oracle) -> tuple[np.ndarray, np.ndarray]:
    dims = _check_dims(dims)
    coords = normalized_coordinates(dims)
    inner = ~boundary_mask(dims)
    v = np.zeros(dims)
    m = np.zeros(dims)
    if inner.any():
        out = oracle(coords[inner])
        v[inner] = out[:, 0]
        m[inner] = out[:, 1]
    return v, m


def generate_from_cppn(
    cppn: CppnGenome,
    dims=DEFAULT_DIMS,
    prune: bool = True,
    interior_passive: str = "allow",
) -> VoxelGrid:
    """Morphology from a two-output (presence, material) CPPN."""
    if cppn.n_outputs != 2 or cppn.n_inputs != 4:
        raise ValueError("direct encoding needs a CPPN with inputs (x, y, z) and outputs (v, m)")
    v, m = _interior_query(dims, lambda c: evaluate(cppn, c))
    return _assemble(v, m, dims, prune, interior_passive)


def generate_from_substrate(
    net: SubstrateNetwork,
    dims=DEFAULT_DIMS,
    prune: bool = True,
    interior_passive: str = "allow",
) -> VoxelGrid:
    """Morphology from a HyperNEAT substrate network."""
    v, m = _interior_query(dims, lambda c: query_substrate(net, c))
    return _assemble(v, m, dims, prune, interior_passive)


# ---------------------------------------------------------------------------
# morphology files
#
# Text form:
#   format voxevo-morphology 1
#   dims X Y Z
#   legend 0=empty 1=passive 3=contractile
#   order x-major
#   data
#   then X blocks (one per x index) of Y lines of Z digits, blocks separated
#   by a blank line.
#
# Binary form: the 8 bytes b"VXMORPH1", three little-endian uint16 dims,
# then X*Y*Z uint8 codes in x-major order.

TEXT_MAGIC = "format voxevo-morphology 1"
BINARY_MAGIC = b"VXMORPH1"


def dumps_morphology(grid: VoxelGrid) -> str:
    X, Y, Z = grid.dims
    lines = [TEXT_MAGIC, f"dims {X} {Y} {Z}", "legend 0=empty 1=passive 3=contractile", "order x-major", "data"]
    for x in range(X):
        for y in range(Y):
            lines.append("".join(str(int(c)) for c in grid.materials[x, y]))
        if x < X - 1:
            lines.append("")
    return "\n".join(lines) + "\n"


def dump_morphology_bytes(grid: VoxelGrid) -> bytes:
    return BINARY_MAGIC + struct.pack("<3H", *grid.dims) + grid.materials.astype(np.uint8).tobytes(order="C")


def _validated(mats: np.ndarray, check_enclosure: bool) -> VoxelGrid:
    grid = VoxelGrid(mats)
    if check_enclosure and not grid.has_enclosure():
        raise MorphologyFormatError("boundary shell is not entirely passive")
    return grid


def loads_morphology(text: str, check_enclosure: bool = True) -> VoxelGrid:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TEXT_MAGIC:
        raise MorphologyFormatError("missing morphology header")
    try:
        start = lines.index("data")
        dims_line = next(l for l in lines[:start] if l.startswith("dims "))
    except (ValueError, StopIteration) as exc:
        raise MorphologyFormatError("malformed morphology header") from exc
    dims = _check_dims(dims_line.split()[1:])
    rows = [l.strip() for l in lines[start + 1 :] if l.strip()]
    X, Y, Z = dims
    if len(rows) != X * Y or any(len(r) != Z for r in rows):
        raise MorphologyFormatError("data block does not match dims")
    mats = np.array([[int(ch) for ch in r] for r in rows], dtype=np.int8).reshape(dims)
    return _validated(mats, check_enclosure)


def load_morphology_bytes(data: bytes, check_enclosure: bool = True) -> VoxelGrid:
    if not data.startswith(BINARY_MAGIC):
        raise MorphologyFormatError("missing binary morphology magic")
    head = len(BINARY_MAGIC)
    dims = _check_dims(struct.unpack_from("<3H", data, head))
    body = data[head + 6 :]
    if len(body) != int(np.prod(dims)):
        raise MorphologyFormatError("payload size does not match dims")
    mats = np.frombuffer(body, dtype=np.uint8).astype(np.int8).reshape(dims)
    return _validated(mats, check_enclosure)


def write_morphology(grid: VoxelGrid, path, binary: bool = False) -> None:
    path = Path(path)
    if binary:
        path.write_bytes(dump_morphology_bytes(grid))
    else:
        path.write_text(dumps_morphology(grid))


def read_morphology(path, check_enclosure: bool = True) -> VoxelGrid:
    data = Path(path).read_bytes()
    if data.startswith(BINARY_MAGIC):
        return load_morphology_bytes(data, check_enclosure)
    return loads_morphology(data.decode("ascii"), check_enclosure)


def dumps_mesh(grid: VoxelGrid, edge_length: float = 1.0) -> str:
    """Wavefront OBJ of every exposed voxel face, one material group each."""
    out = io.StringIO()
    out.write("# voxevo voxel surface\n")
    mats = grid.materials
    padded = np.pad(mats, 1)
    # (normal axis, sign) -> corner offsets of that face, counter-clockwise
    faces = {
        (0, -1): [(0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)],
        (0, 1): [(1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)],
        (1, -1): [(0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)],
        (1, 1): [(0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)],
        (2, -1): [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)],
        (2, 1): [(0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)],
    }
    vert_index: dict[tuple[int, int, int], int] = {}
    groups: dict[int, list[list[int]]] = {int(Material.PASSIVE): [], int(Material.CONTRACTILE): []}
    for cell in np.argwhere(mats != Material.EMPTY):
        x, y, z = (int(c) for c in cell)
        for (axis, sign), corners in faces.items():
            nb = [x + 1, y + 1, z + 1]
            nb[axis] += sign
            if padded[tuple(nb)] != Material.EMPTY:
                continue
            idx = []
            for dx, dy, dz in corners:
                key = (x + dx, y + dy, z + dz)
                if key not in vert_index:
                    vert_index[key] = len(vert_index) + 1
                idx.append(vert_index[key])
            groups[int(mats[x, y, z])].append(idx)
    for (vx, vy, vz), _ in sorted(vert_index.items(), key=lambda kv: kv[1]):
        out.write(f"v {vx * edge_length:g} {vy * edge_length:g} {vz * edge_length:g}\n")
    for code, flist in groups.items():
        out.write(f"g {Material(code).name.lower()}\n")
        for f in flist:
            out.write("f " + " ".join(map(str, f)) + "\n")
    return out.getvalue()
