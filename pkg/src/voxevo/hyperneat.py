"""HyperNEAT substrates painted by a CPPN.

A substrate is a stack of layers of neurons placed at coordinates in
``[-1, 1]^d``. The CPPN is queried with the concatenated coordinates of a
source and a target neuron to get the connection weight, and with the
neuron's own coordinates followed by zeros to get its bias. Raw outputs at
or below the threshold in magnitude leave the connection out; the rest are
mapped affinely onto ``(0, weight_range]`` keeping their sign.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxevo.cppn import CppnConfig, CppnGenome, evaluate, selu

__all__ = [
    "SubstrateSpec",
    "SubstrateNetwork",
    "build_network",
    "query_substrate",
    "scale_weights",
    "selu",
    "substrate_cppn_config",
]


@dataclass(frozen=True)
class SubstrateSpec:
    """Layer-by-layer neuron coordinates.

    ``layers[0]`` holds the three input neurons (x, y, z of the queried cell),
    ``layers[-1]`` the two output neurons (presence, material).
    """

    layers: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.atleast_2d(np.asarray(l, dtype=float)) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if len(layers) < 2:
            raise ValueError("a substrate needs at least an input and an output layer")
        if len(layers[0]) != 3 or len(layers[-1]) != 2:
            raise ValueError("substrate must have 3 inputs and 2 outputs")
        dim = layers[0].shape[1]
        for l in layers:
            if l.shape[1] != dim:
                raise ValueError("all neuron coordinates must share one dimension")
            if len({tuple(p) for p in l}) != len(l):
                raise ValueError("neuron coordinates within a layer must be distinct")
            if np.any(np.abs(l) > 1.0):
                raise ValueError("neuron coordinates must lie in [-1, 1]")

    @classmethod
    def grid(cls, hidden_layers: int = 2, width: int = 5) -> SubstrateSpec:
        """2-D substrate with evenly spaced horizontal layers.

        Inputs sit on y = -1, outputs on y = +1, hidden layers in between.
        """
        if hidden_layers < 0 or (hidden_layers > 0 and width < 1):
            raise ValueError("bad substrate shape")
        sizes = [3] + [width] * hidden_layers + [2]
        ys = np.linspace(-1.0, 1.0, len(sizes))
        layers = []
        for n, y in zip(sizes, ys):
            xs = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
            layers.append(np.column_stack([xs, np.full(n, y)]))
        return cls(tuple(layers))

    @property
    def dim(self) -> int:
        return self.layers[0].shape[1]

    @property
    def hidden_shape(self) -> tuple[int, ...]:
        return tuple(len(l) for l in self.layers[1:-1])


def substrate_cppn_config(spec: SubstrateSpec | None = None, **kwargs) -> CppnConfig:
    """CPPN shape needed to paint ``spec``: two coordinates per endpoint, one output."""
    dim = 2 if spec is None else spec.dim
    return CppnConfig(n_inputs=2 * dim, n_outputs=1, **kwargs)


@dataclass(frozen=True)
class SubstrateNetwork:
    """Weights (``weights[k]`` is layer k -> k+1, shape ``(n_k, n_{k+1})``).

    Absent connections and biases hold 0 and are False in the masks.
    """

    spec: SubstrateSpec
    weights: tuple[np.ndarray, ...]
    weight_mask: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    bias_mask: tuple[np.ndarray, ...]

    @property
    def n_connections(self) -> int:
        return int(sum(m.sum() for m in self.weight_mask))

    def to_dict(self) -> dict:
        return {
            "layers": [l.tolist() for l in self.spec.layers],
            "weights": [np.where(m, w, np.nan).tolist() for w, m in zip(self.weights, self.weight_mask)],
            "biases": [np.where(m, b, np.nan).tolist() for b, m in zip(self.biases, self.bias_mask)],
        }


def scale_weights(raw, threshold: float = 0.2, weight_range: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Threshold and rescale raw CPPN outputs.

    ``|raw| <= threshold`` -> absent; otherwise
    ``sign(raw) * weight_range * (min(|raw|, 1) - threshold) / (1 - threshold)``.

    Returns:
        (weights, present mask)
    """
    raw = np.asarray(raw, dtype=float)
    mag = np.abs(raw)
    present = mag > threshold
    clipped = np.minimum(mag, 1.0)
    # ratio first: (a - t) / (1 - t) <= 1 exactly when a <= 1, so |w| never exceeds the range
    w = np.where(present, np.sign(raw) * (weight_range * ((clipped - threshold) / (1.0 - threshold))), 0.0)
    return w, present


def build_network(
    cppn: CppnGenome,
    spec: SubstrateSpec,
    threshold: float = 0.2,
    weight_range: float = 3.0,
) -> SubstrateNetwork:
    """Paint the substrate's weights and biases with ``cppn``."""
    dim = spec.dim
    if cppn.n_inputs - 1 != 2 * dim or cppn.n_outputs != 1:
        raise ValueError(f"substrate CPPN needs {2 * dim} coordinate inputs and 1 output")
    weights, wmask, biases, bmask = [], [], [], []
    for src, dst in zip(spec.layers[:-1], spec.layers[1:]):
        ns, nd = len(src), len(dst)
        pairs = np.concatenate([np.repeat(src, nd, axis=0), np.tile(dst, (ns, 1))], axis=1)
        raw = evaluate(cppn, pairs)[:, 0].reshape(ns, nd)
        w, m = scale_weights(raw, threshold, weight_range)
        weights.append(w)
        wmask.append(m)
        raw_b = evaluate(cppn, np.concatenate([dst, np.zeros_like(dst)], axis=1))[:, 0]
        b, bm = scale_weights(raw_b, threshold, weight_range)
        biases.append(b)
        bmask.append(bm)
    return SubstrateNetwork(spec, tuple(weights), tuple(wmask), tuple(biases), tuple(bmask))


def query_substrate(net: SubstrateNetwork, coords) -> np.ndarray:
    """Feedforward pass; SELU on hidden layers, identity on the outputs.

    ``coords`` is ``(3,)`` or ``(n, 3)``; the result is ``(2,)`` or ``(n, 2)``
    holding (presence, material).
    """
    x = np.asarray(coords, dtype=float)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if k < last:
            h = selu(h)
    return h[0] if single else h
