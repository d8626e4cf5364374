"""Compositional Pattern-Producing Network genomes.

A genome is an immutable bag of node genes and connection genes. The
network it encodes is a feedforward graph with heterogeneous activation
functions; it is queried once per spatial coordinate.

Node ids are laid out as ``0 .. n_inputs-1`` for inputs (the last input is a
constant 1.0 bias), ``n_inputs .. n_inputs+n_outputs-1`` for outputs, and
anything above that for hidden nodes.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np


class StructuralError(ValueError):
    """Raised when a genome does not describe a valid feedforward network."""


class ActivationKind(str, enum.Enum):
    SIGMOID = "sigmoid"
    SINE = "sine"
    NEG_SINE = "negative-sine"
    SQUARE = "square"
    NEG_SQUARE = "negative-square"
    SQRT_ABS = "sqrt-abs"
    NEG_SQRT_ABS = "negative-sqrt-abs"
    ABS = "abs"
    NEG_ABS = "negative-abs"
    # substrate networks only
    SELU = "selu"


#: The nine functions a CPPN node may carry.
CPPN_ACTIVATIONS: tuple[ActivationKind, ...] = tuple(
    k for k in ActivationKind if k is not ActivationKind.SELU
)

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def _sigmoid(x):
    # split branches so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def selu(x):
    """Scaled exponential linear unit, elementwise."""
    x = np.asarray(x, dtype=float)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


_FUNCS = {
    ActivationKind.SIGMOID: _sigmoid,
    ActivationKind.SINE: np.sin,
    ActivationKind.NEG_SINE: lambda x: -np.sin(x),
    ActivationKind.SQUARE: np.square,
    ActivationKind.NEG_SQUARE: lambda x: -np.square(x),
    ActivationKind.SQRT_ABS: lambda x: np.sqrt(np.abs(x)),
    ActivationKind.NEG_SQRT_ABS: lambda x: -np.sqrt(np.abs(x)),
    ActivationKind.ABS: np.abs,
    ActivationKind.NEG_ABS: lambda x: -np.abs(x),
    ActivationKind.SELU: selu,
}


def apply_activation(kind: ActivationKind | str, x):
    """Apply activation ``kind`` to a scalar or array.

    Scalars in give a Python float back.
    """
    kind = ActivationKind(kind)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _FUNCS[kind](np.asarray(x, dtype=float))
    if np.ndim(out) == 0:
        return float(out)
    return out


class NodeRole(str, enum.Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"


@dataclass(frozen=True)
class NodeGene:
    id: int
    role: NodeRole
    # None for inputs; they pass their value through untouched
    activation: ActivationKind | None = None


@dataclass(frozen=True)
class ConnectionGene:
    innovation: int
    source: int
    target: int
    weight: float
    enabled: bool = True


@dataclass(frozen=True)
class CppnGenome:
    """Immutable CPPN genome.

    ``nodes`` and ``connections`` are tuples kept sorted by id and innovation
    number respectively, so two genomes with the same genes compare equal.
    """

    nodes: tuple[NodeGene, ...]
    connections: tuple[ConnectionGene, ...]
    n_inputs: int
    n_outputs: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(
            self, "connections", tuple(sorted(self.connections, key=lambda c: c.innovation))
        )
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise StructuralError("duplicate node id")
        innov = [c.innovation for c in self.connections]
        if len(set(innov)) != len(innov):
            raise StructuralError("duplicate innovation number")
        for n in self.nodes:
            if n.role is NodeRole.INPUT:
                if n.activation is not None:
                    raise StructuralError(f"input node {n.id} cannot carry an activation")
            elif n.activation not in CPPN_ACTIVATIONS:
                raise StructuralError(f"node {n.id} needs one of the nine CPPN activations")
        pairs = [(c.source, c.target) for c in self.connections if c.enabled]
        if len(set(pairs)) != len(pairs):
            raise StructuralError("two enabled connections share a (source, target) pair")
        known = set(ids)
        for c in self.connections:
            if c.source not in known or c.target not in known:
                raise StructuralError(f"connection {c.innovation} references a missing node")

    # ---- structure helpers -------------------------------------------------

    @property
    def input_ids(self) -> range:
        return range(self.n_inputs)

    @property
    def output_ids(self) -> range:
        return range(self.n_inputs, self.n_inputs + self.n_outputs)

    @property
    def hidden_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.role is NodeRole.HIDDEN]

    @cached_property
    def node_map(self) -> dict[int, NodeGene]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def topological_order(self) -> list[int]:
        """Node ids ordered so every enabled connection points forward.

        Raises:
            StructuralError: if the enabled connections contain a cycle.
        """
        return _toposort([n.id for n in self.nodes], [(c.source, c.target) for c in self.connections if c.enabled])

    def is_acyclic(self, include_disabled: bool = False) -> bool:
        edges = [(c.source, c.target) for c in self.connections if include_disabled or c.enabled]
        try:
            _toposort([n.id for n in self.nodes], edges)
        except StructuralError:
            return False
        return True

    def with_connections(self, connections: Iterable[ConnectionGene]) -> CppnGenome:
        return CppnGenome(self.nodes, tuple(connections), self.n_inputs, self.n_outputs)

    def with_nodes(self, nodes: Iterable[NodeGene]) -> CppnGenome:
        return CppnGenome(tuple(nodes), self.connections, self.n_inputs, self.n_outputs)

    # ---- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "voxevo-cppn",
            "version": 1,
            "n_inputs": self.n_inputs,
            "n_outputs": self.n_outputs,
            "nodes": [
                {"id": n.id, "role": n.role.value, "activation": n.activation.value if n.activation else None}
                for n in self.nodes
            ],
            "connections": [
                {
                    "innovation": c.innovation,
                    "source": c.source,
                    "target": c.target,
                    "weight": c.weight,
                    "enabled": c.enabled,
                }
                for c in self.connections
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> CppnGenome:
        if data.get("format") != "voxevo-cppn":
            raise ValueError("not a CPPN genome document")
        nodes = [
            NodeGene(
                int(n["id"]),
                NodeRole(n["role"]),
                ActivationKind(n["activation"]) if n["activation"] is not None else None,
            )
            for n in data["nodes"]
        ]
        conns = [
            ConnectionGene(
                int(c["innovation"]), int(c["source"]), int(c["target"]), float(c["weight"]), bool(c["enabled"])
            )
            for c in data["connections"]
        ]
        return cls(tuple(nodes), tuple(conns), int(data["n_inputs"]), int(data["n_outputs"]))

    def dumps(self) -> str:
        # repr-exact floats through json keep the round trip lossless
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> CppnGenome:
        return cls.from_dict(json.loads(text))


def _toposort(node_ids: Sequence[int], edges: Sequence[tuple[int, int]]) -> list[int]:
    indeg = {n: 0 for n in node_ids}
    succ: dict[int, list[int]] = {n: [] for n in node_ids}
    for s, t in edges:
        succ[s].append(t)
        indeg[t] += 1
    ready = sorted(n for n, d in indeg.items() if d == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for t in succ[n]:
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
    if len(order) != len(node_ids):
        raise StructuralError("connection graph contains a cycle")
    return order


def creates_cycle(genome: CppnGenome, source: int, target: int) -> bool:
    """True if adding ``source -> target`` closes a loop (any connection counts)."""
    if source == target:
        return True
    succ: dict[int, list[int]] = {}
    for c in genome.connections:
        succ.setdefault(c.source, []).append(c.target)
    stack, seen = [target], set()
    while stack:
        n = stack.pop()
        if n == source:
            return True
        if n in seen:
            continue
        seen.add(n)
        stack.extend(succ.get(n, ()))
    return False


def evaluate(genome: CppnGenome, inputs) -> np.ndarray:
    """Forward pass of ``genome``.

    Args:
        genome: the network to run.
        inputs: coordinate inputs, shape ``(n_inputs - 1,)`` for one query or
            ``(n, n_inputs - 1)`` for a batch. The bias input is supplied here.

    Returns:
        Output values, shape ``(n_outputs,)`` or ``(n, n_outputs)``.
    """
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    n_coord = genome.n_inputs - 1
    if x.shape[1] != n_coord:
        raise ValueError(f"expected {n_coord} coordinate inputs, got {x.shape[1]}")

    incoming: dict[int, list[ConnectionGene]] = {}
    for c in genome.connections:
        if c.enabled:
            incoming.setdefault(c.target, []).append(c)

    values: dict[int, np.ndarray] = {i: x[:, i] for i in range(n_coord)}
    values[n_coord] = np.ones(len(x))
    nodes = genome.node_map
    with np.errstate(over="ignore", invalid="ignore"):
        for nid in genome.topological_order:
            node = nodes[nid]
            if node.role is NodeRole.INPUT:
                continue
            total = np.zeros(len(x))
            for c in incoming.get(nid, ()):
                total = total + c.weight * values[c.source]
            values[nid] = _FUNCS[node.activation](total)
    out = np.stack([values[o] for o in genome.output_ids], axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class CppnConfig:
    """Shape and initialization of fresh genomes.

    ``n_inputs`` counts the coordinate inputs only; the bias input is added
    on top.
    """

    n_inputs: int = 3
    n_outputs: int = 2
    weight_init_range: tuple[float, float] = (-1.0, 1.0)
    activations: tuple[ActivationKind, ...] = field(default=CPPN_ACTIVATIONS)

    @property
    def total_inputs(self) -> int:
        return self.n_inputs + 1

    @property
    def initial_innovations(self) -> int:
        return self.total_inputs * self.n_outputs


def random_genome(config: CppnConfig, rng: np.random.Generator) -> CppnGenome:
    """Fully connected input->output genome with no hidden nodes.

    Innovation numbers are a fixed function of the (input, output) pair, so
    every initial genome of a run agrees on them.
    """
    n_in, n_out = config.total_inputs, config.n_outputs
    lo, hi = config.weight_init_range
    acts = config.activations
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(n_in)]
    picks = rng.integers(len(acts), size=n_out)
    nodes += [NodeGene(n_in + o, NodeRole.OUTPUT, acts[int(picks[o])]) for o in range(n_out)]
    weights = rng.uniform(lo, hi, size=(n_in, n_out))
    conns = [
        ConnectionGene(i * n_out + o + 1, i, n_in + o, float(weights[i, o]))
        for i in range(n_in)
        for o in range(n_out)
    ]
    return CppnGenome(tuple(nodes), tuple(conns), n_in, n_out)


def replace_connection(genome: CppnGenome, innovation: int, **changes) -> CppnGenome:
    """Copy of ``genome`` with one connection gene's fields changed."""
    conns = [replace(c, **changes) if c.innovation == innovation else c for c in genome.connections]
    return genome.with_connections(conns)
