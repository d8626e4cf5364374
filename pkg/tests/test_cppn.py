from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voxevo.cppn import (
    CPPN_ACTIVATIONS,
    ActivationKind,
    ConnectionGene,
    CppnConfig,
    CppnGenome,
    NodeGene,
    NodeRole,
    StructuralError,
    apply_activation,
    creates_cycle,
    evaluate,
    random_genome,
)
from voxevo.neat import InnovationLedger, NeatConfig, mutate

A = ActivationKind


def bias_only(weight=0.0, enabled=True, act=A.SIGMOID):
    """4 inputs (x, y, z, bias=3), one output (id 4), one bias link."""
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(4)] + [NodeGene(4, NodeRole.OUTPUT, act)]
    return CppnGenome(tuple(nodes), (ConnectionGene(1, 3, 4, weight, enabled),), 4, 1)


# ---- activations ----------------------------------------------------------


@pytest.mark.parametrize(
    "kind, x, expected",
    [
        (A.SIGMOID, 0.0, 0.5),
        (A.NEG_SQUARE, 2.0, -4.0),
        (A.SQRT_ABS, -0.25, 0.5),
        (A.SQUARE, -3.0, 9.0),
        (A.ABS, -1.5, 1.5),
        (A.NEG_ABS, -1.5, -1.5),
        (A.SINE, math.pi / 2, 1.0),
        (A.NEG_SINE, math.pi / 2, -1.0),
        (A.NEG_SQRT_ABS, 4.0, -2.0),
    ],
)
def test_activation_values(kind, x, expected):
    assert apply_activation(kind, x) == pytest.approx(expected, abs=1e-15)


@given(st.floats(-50, 50, allow_nan=False))
def test_activations_match_definitions(x):
    assert apply_activation(A.SIGMOID, x) == pytest.approx(1.0 / (1.0 + math.exp(-x)), rel=1e-12)
    assert apply_activation(A.SINE, x) == math.sin(x)
    assert apply_activation(A.SQUARE, x) == x * x
    assert apply_activation(A.SQRT_ABS, x) == math.sqrt(abs(x))
    assert apply_activation(A.ABS, x) == abs(x)


@given(st.floats(-1e3, 1e3, allow_nan=False))
def test_negative_variants_are_exact_negations(x):
    pairs = [(A.SINE, A.NEG_SINE), (A.SQUARE, A.NEG_SQUARE), (A.SQRT_ABS, A.NEG_SQRT_ABS), (A.ABS, A.NEG_ABS)]
    for pos, neg in pairs:
        assert apply_activation(neg, x) == -apply_activation(pos, x)


def test_nine_function_set_excludes_selu():
    assert len(CPPN_ACTIVATIONS) == 9
    assert A.SELU not in CPPN_ACTIVATIONS


def test_sigmoid_is_finite_at_extremes():
    assert apply_activation(A.SIGMOID, -1e4) == 0.0
    assert apply_activation(A.SIGMOID, 1e4) == 1.0


# ---- genome structure -----------------------------------------------------


def test_genome_rejects_selu_and_bad_structure():
    with pytest.raises(StructuralError):
        bias_only(act=A.SELU)
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(4)] + [NodeGene(4, NodeRole.OUTPUT, A.ABS)]
    with pytest.raises(StructuralError):
        CppnGenome(tuple(nodes), (ConnectionGene(1, 3, 9, 1.0),), 4, 1)
    with pytest.raises(StructuralError):
        CppnGenome(tuple(nodes), (ConnectionGene(1, 3, 4, 1.0), ConnectionGene(1, 2, 4, 1.0)), 4, 1)
    with pytest.raises(StructuralError):
        CppnGenome(tuple(nodes), (ConnectionGene(1, 3, 4, 1.0), ConnectionGene(2, 3, 4, 1.0)), 4, 1)
    with pytest.raises(StructuralError):
        CppnGenome(tuple(nodes + [NodeGene(4, NodeRole.HIDDEN, A.ABS)]), (), 4, 1)


# ---- evaluation -----------------------------------------------------------


def test_zero_weight_bias_link_gives_half():
    assert evaluate(bias_only(0.0), [0.0, 0.0, 0.0])[0] == 0.5


def test_disabled_link_equals_absent():
    assert evaluate(bias_only(2.0, enabled=False), [0.3, -0.2, 0.9])[0] == 0.5


def test_chain_matches_hand_computed_forward_pass():
    # x -> h1 (sine) -> h2 (square) -> out (sigmoid), plus bias -> h2 and y -> out
    nodes = [NodeGene(i, NodeRole.INPUT) for i in range(4)] + [
        NodeGene(4, NodeRole.OUTPUT, A.SIGMOID),
        NodeGene(5, NodeRole.HIDDEN, A.SINE),
        NodeGene(6, NodeRole.HIDDEN, A.SQUARE),
    ]
    conns = (
        ConnectionGene(1, 0, 5, 0.7),
        ConnectionGene(2, 5, 6, -1.3),
        ConnectionGene(3, 3, 6, 0.4),
        ConnectionGene(4, 6, 4, 2.0),
        ConnectionGene(5, 1, 4, -0.5),
    )
    g = CppnGenome(tuple(nodes), conns, 4, 1)
    x, y, z = 0.6, -0.25, 0.1
    h1 = math.sin(0.7 * x)
    h2 = (-1.3 * h1 + 0.4 * 1.0) ** 2
    out = 1.0 / (1.0 + math.exp(-(2.0 * h2 - 0.5 * y)))
    assert evaluate(g, [x, y, z])[0] == pytest.approx(out, abs=1e-15)
    batch = evaluate(g, np.array([[x, y, z], [0.0, 0.0, 0.0]]))
    assert batch.shape == (2, 1)
    assert batch[0, 0] == pytest.approx(out, abs=1e-15)


def test_evaluate_rejects_wrong_arity():
    with pytest.raises(ValueError):
        evaluate(bias_only(), [0.0, 0.0])


def test_cycle_detection():
    g = random_genome(CppnConfig(), np.random.default_rng(0))
    # outputs 4 -> input 0 closes nothing (inputs have no outgoing path back) but a self-loop does
    assert creates_cycle(g, 4, 4)
    assert not creates_cycle(g, 0, 5)
    nodes = list(g.nodes) + [NodeGene(6, NodeRole.HIDDEN, A.ABS)]
    h = CppnGenome(tuple(nodes), g.connections + (ConnectionGene(99, 6, 4, 1.0),), 4, 2)
    assert creates_cycle(h, 4, 6)


# ---- random genomes -------------------------------------------------------


def test_random_genome_shape():
    g = random_genome(CppnConfig(n_outputs=2), np.random.default_rng(1))
    assert g.n_inputs == 4 and g.n_outputs == 2
    assert len(g.connections) == 8
    assert not g.hidden_ids
    assert all(-1.0 <= c.weight <= 1.0 for c in g.connections)


def test_random_genome_deterministic_and_innovations_shared():
    a = random_genome(CppnConfig(), np.random.default_rng(5))
    b = random_genome(CppnConfig(), np.random.default_rng(5))
    assert a == b
    c = random_genome(CppnConfig(), np.random.default_rng(6))
    key = lambda g: {(x.source, x.target): x.innovation for x in g.connections}
    assert key(a) == key(c)


def test_output_activation_frequencies():
    rng = np.random.default_rng(123)
    n = 1000
    counts = {k: 0 for k in CPPN_ACTIVATIONS}
    for _ in range(n):
        g = random_genome(CppnConfig(), rng)
        for nid in g.output_ids:
            counts[g.node_map[nid].activation] += 1
    trials = 2 * n
    p = 1 / 9
    sigma = math.sqrt(trials * p * (1 - p))
    for k, c in counts.items():
        assert abs(c - trials * p) <= 3 * sigma, (k, c)


# ---- serialization and invariants -----------------------------------------


def _evolved(seed: int, steps: int = 15) -> CppnGenome:
    rng = np.random.default_rng(seed)
    cfg = NeatConfig()
    ledger = InnovationLedger.for_config(cfg.cppn)
    g = random_genome(cfg.cppn, rng)
    for _ in range(steps):
        g = mutate(g, cfg, ledger, rng)
    return g


@given(st.integers(0, 10_000))
def test_roundtrip_serialization(seed):
    g = _evolved(seed)
    assert CppnGenome.loads(g.dumps()) == g


@given(st.integers(0, 10_000))
def test_evolved_genomes_stay_acyclic(seed):
    assert _evolved(seed, 25).is_acyclic(include_disabled=True)


@given(st.integers(0, 10_000), st.floats(-3, 3, allow_nan=False))
def test_adding_disabled_connection_changes_nothing(seed, w):
    g = _evolved(seed)
    pts = np.random.default_rng(seed).uniform(-1, 1, (16, 3))
    present = {(c.source, c.target) for c in g.connections}
    cand = [
        (s, t)
        for s in list(g.input_ids) + g.hidden_ids
        for t in g.hidden_ids + list(g.output_ids)
        if (s, t) not in present and not creates_cycle(g, s, t)
    ]
    if not cand:
        return
    s, t = cand[0]
    h = g.with_connections(g.connections + (ConnectionGene(10_000, s, t, w, False),))
    np.testing.assert_array_equal(evaluate(g, pts), evaluate(h, pts))


def test_evaluate_is_pure():
    g = _evolved(3)
    pts = np.random.default_rng(0).uniform(-1, 1, (32, 3))
    np.testing.assert_array_equal(evaluate(g, pts), evaluate(g, pts))
