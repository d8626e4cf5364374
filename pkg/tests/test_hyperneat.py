from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxevo.cppn import (
    SELU_ALPHA,
    SELU_LAMBDA,
    ActivationKind,
    ConnectionGene,
    CppnGenome,
    NodeGene,
    NodeRole,
    random_genome,
)
from voxevo.hyperneat import (
    SubstrateNetwork,
    SubstrateSpec,
    build_network,
    query_substrate,
    scale_weights,
    selu,
    substrate_cppn_config,
)
from voxevo.neat import InnovationLedger, NeatConfig, mutate

A = ActivationKind


def constant_cppn(value: float) -> CppnGenome:
    """Substrate CPPN whose output is ``value`` everywhere (bias -> +-abs output)."""
    act = A.ABS if value >= 0 else A.NEG_ABS
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(5)] + [NodeGene(5, NodeRole.OUTPUT, act)]
    return CppnGenome(tuple(nodes), (ConnectionGene(1, 4, 5, abs(value)),), 5, 1)


def test_selu_values():
    assert selu(0.0) == 0.0
    assert selu(1.0) == SELU_LAMBDA
    assert float(selu(-30.0)) == pytest.approx(-SELU_LAMBDA * SELU_ALPHA, rel=1e-12)
    x = -0.7
    assert float(selu(x)) == pytest.approx(SELU_LAMBDA * SELU_ALPHA * (math.exp(x) - 1), rel=1e-14)


def test_grid_spec_defaults():
    spec = SubstrateSpec.grid()
    assert [len(l) for l in spec.layers] == [3, 5, 5, 2]
    assert np.all(spec.layers[0][:, 1] == -1.0) and np.all(spec.layers[-1][:, 1] == 1.0)
    assert spec.hidden_shape == (5, 5)


def test_spec_validation():
    with pytest.raises(ValueError):
        SubstrateSpec((np.zeros((3, 2)), np.zeros((2, 2))))  # repeated coordinates
    with pytest.raises(ValueError):
        SubstrateSpec((np.array([[0, 0], [1, 0]]), np.array([[0, 1], [1, 1]])))
    with pytest.raises(ValueError):
        SubstrateSpec((np.array([[-1, 0], [0, 0], [2, 0]]), np.array([[0, 1], [1, 1]])))


def test_constant_below_threshold_gives_no_connections():
    net = build_network(constant_cppn(0.1), SubstrateSpec.grid())
    assert net.n_connections == 0
    assert not any(m.any() for m in net.bias_mask)


def test_threshold_is_strict():
    net = build_network(constant_cppn(0.2), SubstrateSpec.grid())
    assert net.n_connections == 0


def test_constant_one_gives_weight_three():
    net = build_network(constant_cppn(1.0), SubstrateSpec.grid())
    for w, m in zip(net.weights, net.weight_mask):
        assert m.all()
        assert np.all(w == 3.0)
    net = build_network(constant_cppn(-1.0), SubstrateSpec.grid())
    assert all(np.all(w == -3.0) for w in net.weights)


def test_scale_formula():
    w, m = scale_weights(np.array([0.2, 0.6, -0.6, 1.0, 5.0, 0.2000001]))
    assert list(m) == [False, True, True, True, True, True]
    assert w[1] == pytest.approx(3 * 0.4 / 0.8)
    assert w[2] == pytest.approx(-3 * 0.4 / 0.8)
    assert w[3] == 3.0 and w[4] == 3.0
    assert 0 < w[5] < 1e-5


@given(st.floats(-10, 10, allow_nan=False), st.floats(0, 5, allow_nan=False))
def test_threshold_monotone(raw, grow):
    _, m0 = scale_weights(raw)
    _, m1 = scale_weights(math.copysign(abs(raw) + grow, raw))
    assert m1 >= m0


def test_empty_network_outputs_zero():
    spec = SubstrateSpec.grid(1, 3)
    zero = SubstrateNetwork(
        spec,
        tuple(np.zeros((len(a), len(b))) for a, b in zip(spec.layers[:-1], spec.layers[1:])),
        tuple(np.zeros((len(a), len(b)), bool) for a, b in zip(spec.layers[:-1], spec.layers[1:])),
        tuple(np.zeros(len(l)) for l in spec.layers[1:]),
        tuple(np.zeros(len(l), bool) for l in spec.layers[1:]),
    )
    np.testing.assert_array_equal(query_substrate(zero, [0.3, -0.2, 0.5]), [0.0, 0.0])


def hand_network():
    """CPPN computing (x_m + 0.5 * y_h) ** 2."""
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(5)] + [NodeGene(5, NodeRole.OUTPUT, A.SQUARE)]
    conns = (ConnectionGene(1, 0, 5, 1.0), ConnectionGene(2, 3, 5, 0.5))
    return CppnGenome(tuple(nodes), conns, 5, 1)


def test_hand_computed_forward_pass():
    spec = SubstrateSpec(
        (
            np.array([[-1.0, -1.0], [0.0, -1.0], [1.0, -1.0]]),
            np.array([[-0.5, 0.0], [0.5, 0.0]]),
            np.array([[-1.0, 1.0], [1.0, 1.0]]),
        )
    )
    cppn = hand_network()
    net = build_network(cppn, spec)

    def paint(raw):
        if abs(raw) <= 0.2:
            return 0.0
        return math.copysign(3 * (min(abs(raw), 1) - 0.2) / 0.8, raw)

    def cppn_val(xm, ym, xh, yh):
        return (xm + 0.5 * yh) ** 2

    inputs, hidden, outputs = spec.layers
    W1 = [[paint(cppn_val(*m, *h)) for h in hidden] for m in inputs]
    B1 = [paint(cppn_val(*h, 0, 0)) for h in hidden]
    W2 = [[paint(cppn_val(*m, *h)) for h in outputs] for m in hidden]
    B2 = [paint(cppn_val(*h, 0, 0)) for h in outputs]

    def s(x):
        return SELU_LAMBDA * x if x > 0 else SELU_LAMBDA * SELU_ALPHA * (math.exp(x) - 1)

    q = [0.2, -0.6, 0.9]
    h = [s(sum(q[i] * W1[i][j] for i in range(3)) + B1[j]) for j in range(2)]
    o = [sum(h[i] * W2[i][j] for i in range(2)) + B2[j] for j in range(2)]
    np.testing.assert_allclose(query_substrate(net, q), o, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(net.weights[0], W1, rtol=1e-14)


def test_even_cppn_is_mirror_invariant():
    # a CPPN that only sees squared inputs ignores a global sign flip of coordinates
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(5)] + [
        NodeGene(5, NodeRole.OUTPUT, A.SINE),
        NodeGene(6, NodeRole.HIDDEN, A.SQUARE),
        NodeGene(7, NodeRole.HIDDEN, A.SQUARE),
    ]
    conns = (
        ConnectionGene(1, 0, 6, 1.3),
        ConnectionGene(2, 2, 6, -0.4),
        ConnectionGene(3, 1, 7, 0.8),
        ConnectionGene(4, 3, 7, 0.9),
        ConnectionGene(5, 6, 5, 1.0),
        ConnectionGene(6, 7, 5, -0.7),
        ConnectionGene(7, 4, 5, 0.3),
    )
    cppn = CppnGenome(tuple(nodes), conns, 5, 1)
    spec = SubstrateSpec.grid(2, 4)
    flipped = SubstrateSpec(tuple(-l for l in spec.layers))
    a, b = build_network(cppn, spec), build_network(cppn, flipped)
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
    q = np.array([[0.1, 0.4, -0.3], [-0.9, 0.0, 0.7]])
    np.testing.assert_array_equal(query_substrate(a, q), query_substrate(b, q))


def test_arity_check():
    from voxevo.cppn import CppnConfig

    direct = random_genome(CppnConfig(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        build_network(direct, SubstrateSpec.grid())


@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 5))
def test_random_substrates_respect_weight_bound(seed, hidden, width):
    rng = np.random.default_rng(seed)
    spec = SubstrateSpec.grid(hidden, width)
    cfg = NeatConfig(cppn=substrate_cppn_config(spec))
    ledger = InnovationLedger.for_config(cfg.cppn)
    g = random_genome(cfg.cppn, rng)
    for _ in range(int(rng.integers(0, 10))):
        g = mutate(g, cfg, ledger, rng)
    net = build_network(g, spec)
    for w, m in zip(net.weights + net.biases, net.weight_mask + net.bias_mask):
        assert np.all(np.abs(w) <= 3.0)
        assert np.all(w[~m] == 0.0)
        assert np.all(np.abs(w[m]) > 0.0)
    # adjacency only: one weight table per consecutive layer pair
    assert len(net.weights) == len(spec.layers) - 1
    for k, w in enumerate(net.weights):
        assert w.shape == (len(spec.layers[k]), len(spec.layers[k + 1]))


def test_build_is_pure():
    rng = np.random.default_rng(3)
    g = random_genome(substrate_cppn_config(), rng)
    a, b = build_network(g, SubstrateSpec.grid()), build_network(g, SubstrateSpec.grid())
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
