import pytest

import struct

import numpy as np
from django.core.exceptions import ImproperlyConfigured

from hmlet.checkpoint import HEADER, checkpoint_id, dumps, load_checkpoint, loads, save_checkpoint
from hmlet.exceptions import CheckpointError, ConsistencyError, ShapeError
from hmlet.graph import build_adjacency, graph_from_splits
from hmlet.model import (
    BYPASS, EVAL, GATE_GATING, GATE_LINEAR, GATE_NONLINEAR, PROPAGATE, TRAIN, VARIANT_NAMES, ForwardTrace,
    GateDecisionLog, GatingMLP, ScoreGrads, backward, forward, gate_layer, gate_ratios, init_params, layer_plan,
    propagate_linear, propagate_nonlinear,
)
from hmlet.numerics import ELU, LEAKY_RELU, Rng
from hmlet.trainer import bpr_loss

STEP = 1e-5
USERS = np.array([0, 1, 2, 3])
POSITIVES = np.array([0, 1, 2, 3])
NEGATIVES = np.array([2, 3, 0, 1])


def batch_loss(scores_fn):
    loss = bpr_loss(scores_fn(USERS, POSITIVES), scores_fn(USERS, NEGATIVES))
    return loss


def analytic_gradients(adj, params, tau, phi, seed):
    scores_fn, trace = forward(adj, params, tau=tau, mode=TRAIN, rng=Rng(seed).stream('gumbel'), phi=phi)
    loss = batch_loss(scores_fn)
    score_grads = ScoreGrads.from_triplets(USERS, POSITIVES, NEGATIVES, loss.d_positive, loss.d_negative)
    return trace, backward(trace, adj, params, score_grads)


def numeric_gradients(adj, params, trace, tau, phi):
    numeric = []
    for array in params.arrays():
        grad = np.zeros_like(array)
        for position in np.ndindex(array.shape):
            original = array[position]
            array[position] = original + STEP
            upper = batch_loss(forward(adj, params, tau=tau, mode=TRAIN, phi=phi, replay=trace)[0]).total
            array[position] = original - STEP
            lower = batch_loss(forward(adj, params, tau=tau, mode=TRAIN, phi=phi, replay=trace)[0]).total
            array[position] = original
            grad[position] = (upper - lower) / (2 * STEP)
        numeric.append(grad)
    return numeric


@pytest.mark.parametrize('variant', ['All', 'Front', 'Middle', 'End'])
@pytest.mark.parametrize('seed', [0, 1])
def test_gradients_match_finite_differences(small_adjacency, variant, seed):
    params = init_params(8, 3, variant, Rng(seed).stream('init'))
    trace, grads = analytic_gradients(small_adjacency, params, 0.7, ELU, seed)
    numeric = numeric_gradients(small_adjacency, params, trace, 0.7, ELU)
    assert len(grads.arrays()) == len(numeric) == 1 + 2 * len(layer_plan(variant).gated_layers)
    for analytic, expected in zip(grads.arrays(), numeric):
        assert np.allclose(analytic, expected, rtol=1e-4, atol=1e-9)


@pytest.mark.parametrize('variant, phi, hidden_gate', [
    ('End', LEAKY_RELU, False),
    ('All', LEAKY_RELU, True),
    ('Middle', ELU, True),
])
def test_gradients_of_other_gates(small_adjacency, variant, phi, hidden_gate):
    params = init_params(8, 3, variant, Rng(5).stream('init'), hidden_gate=hidden_gate)
    trace, grads = analytic_gradients(small_adjacency, params, 0.5, phi, 5)
    numeric = numeric_gradients(small_adjacency, params, trace, 0.5, phi)
    for analytic, expected in zip(grads.arrays(), numeric):
        assert np.allclose(analytic, expected, rtol=1e-4, atol=1e-9)


def test_replay_reproduces_forward(small_adjacency):
    params = init_params(8, 3, 'All', Rng(2).stream('init'))
    scores_fn, trace = forward(small_adjacency, params, tau=0.7, mode=TRAIN, rng=Rng(2))
    replayed, _ = forward(small_adjacency, params, tau=0.7, mode=TRAIN, replay=trace)
    assert np.array_equal(scores_fn(USERS, POSITIVES), replayed(USERS, POSITIVES))


def linear_oracle(adj, embeddings, num_users):
    dense = adj.matrix.toarray()
    layers = [embeddings]
    for _ in range(4):
        layers.append(dense @ layers[-1])
    users, items = np.meshgrid(np.arange(num_users), np.arange(adj.num_items), indexing='ij')
    scores = sum(np.einsum('abd,abd->ab', E[users], E[num_users + items]) for E in layers) / 5
    return dense, scores


def test_forced_linear_equals_linear_gcn():
    generator = np.random.default_rng(9)
    train = [sorted(generator.choice(6, size=3, replace=False).tolist()) for _ in range(5)]
    graph = graph_from_splits(train=train, num_items=6)
    adj = build_adjacency(graph)
    params = init_params(graph.num_nodes, 4, 'forced-linear', Rng(9))
    scores_fn, trace = forward(adj, params, mode=TRAIN, rng=Rng(9))
    dense, expected = linear_oracle(adj, params.embeddings, graph.num_users)
    assert np.allclose(trace.score_matrix(), expected, rtol=0, atol=1e-10)
    for layer in range(1, 5):
        assert np.array_equal(trace.E_G[layer], propagate_linear(adj, trace.E_G[layer - 1]))

    users = np.array([0, 1, 2, 3, 4, 0])
    items = np.array([0, 5, 2, 1, 3, 4])
    upstream = generator.normal(size=len(users))
    grads = backward(trace, adj, params, ScoreGrads(users=users, items=items, grads=upstream))
    pairs = np.zeros((graph.num_nodes, graph.num_nodes))
    for u, v, g in zip(users, items, upstream):
        pairs[u, graph.num_users + v] += g
        pairs[graph.num_users + v, u] += g
    powers = [np.linalg.matrix_power(dense, i) for i in range(5)]
    expected_grad = sum(P @ pairs @ P @ params.embeddings for P in powers) / 5
    assert np.allclose(grads.embeddings, expected_grad, rtol=0, atol=1e-8)
    assert grads.gating_mlps == []


def test_residual_score_hand_value():
    E = np.array([[1.0, 0.0], [1.0, 0.0]])
    trace = ForwardTrace(variant=layer_plan('End'), mode=EVAL, tau=1.0, activation=LEAKY_RELU, num_users=1,
                         adjacency=None, E_L=[], E_N=[], E_G=[E] * 5, gates={})
    assert trace.beta == 0.2
    assert trace.scores([0], [0])[0] == pytest.approx(1.0)


def test_residual_sum_ignores_layer_order(small_adjacency):
    params = init_params(8, 3, 'All', Rng(3))
    _, trace = forward(small_adjacency, params, mode=EVAL)
    permuted = ForwardTrace(variant=trace.variant, mode=EVAL, tau=1.0, activation=LEAKY_RELU, num_users=4,
                            adjacency=None, E_L=[], E_N=[], E_G=trace.E_G[::-1], gates={})
    assert np.allclose(trace.score_matrix(), permuted.score_matrix(), rtol=0, atol=1e-15)


@pytest.mark.parametrize('name, expected', [
    ('End', [(BYPASS, GATE_LINEAR)] * 2 + [(PROPAGATE, GATE_GATING)] * 2),
    ('All', [(PROPAGATE, GATE_GATING)] * 4),
    ('Front', [(PROPAGATE, GATE_GATING)] * 2 + [(BYPASS, GATE_LINEAR)] * 2),
    ('middle', [(BYPASS, GATE_LINEAR)] + [(PROPAGATE, GATE_GATING)] * 2 + [(BYPASS, GATE_LINEAR)]),
    ('forced-nonlinear', [(PROPAGATE, GATE_NONLINEAR)] * 4),
])
def test_layer_plan(name, expected):
    plan = layer_plan(name)
    assert [(layer.mode, layer.gate) for layer in plan.layers] == expected


def test_layer_plan_gated_layers():
    assert layer_plan('Middle').gated_layers == (2, 3)
    assert layer_plan('forced-linear').gated_layers == ()
    assert [layer_plan(name).tag for name in VARIANT_NAMES] == list(range(len(VARIANT_NAMES)))


def test_unknown_variant():
    with pytest.raises(ImproperlyConfigured):
        layer_plan('Back')


def test_init_params_reproducible():
    first = init_params(3, 2, 'End', Rng(4))
    second = init_params(3, 2, 'End', Rng(4))
    assert first.embeddings.shape == (3, 2)
    assert all(np.array_equal(a, b) for a, b in zip(first.arrays(), second.arrays()))
    assert all(np.all(mlp.b == 0.0) for mlp in first.gating_mlps)


def test_init_params_variance():
    params = init_params(25_000, 4, 'forced-linear', Rng(0))
    assert params.embeddings.var() == pytest.approx(0.01, rel=0.05)


def test_init_params_rejects_empty_dimension():
    with pytest.raises(ValueError):
        init_params(3, 0, 'End', Rng(0))


def test_propagate_hand_values():
    one = build_adjacency(graph_from_splits(train=[[0]]))
    E = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert propagate_linear(one, E)[0].tolist() == [1.0, 0.0]

    two = build_adjacency(graph_from_splits(train=[[0, 1]]))
    E = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    aggregate = propagate_linear(two, E)
    assert aggregate[0] == pytest.approx([np.sqrt(2), 0.0])
    assert propagate_nonlinear(two, E, E, PROPAGATE, LEAKY_RELU)[0] == pytest.approx([np.sqrt(2), 0.0])
    assert propagate_nonlinear(two, -E, E, PROPAGATE, LEAKY_RELU)[0] == pytest.approx([-0.01 * np.sqrt(2), 0.0])


def test_bypass_hands_on_previous_state(small_adjacency):
    previous = np.random.default_rng(0).normal(size=(8, 3))
    assert propagate_nonlinear(small_adjacency, np.zeros((8, 3)), previous, BYPASS) is previous
    with pytest.raises(ImproperlyConfigured):
        propagate_nonlinear(small_adjacency, previous, previous, 'skip')


def test_fixed_gates():
    E_L, E_N = np.ones((4, 2)), np.zeros((4, 2))
    assert gate_layer(E_L, E_N, None, 1.0, GATE_LINEAR, TRAIN)[0] is E_L
    assert gate_layer(E_L, E_N, None, 1.0, GATE_NONLINEAR, TRAIN)[0] is E_N
    with pytest.raises(ShapeError):
        gate_layer(E_L, np.zeros((4, 3)), None, 1.0, GATE_LINEAR, TRAIN)


def test_dominant_logit_selects_linear():
    generator = np.random.default_rng(1)
    E_L, E_N = generator.normal(size=(1000, 3)), generator.normal(size=(1000, 3))
    mlp = GatingMLP(w=np.zeros((6, 2)), b=np.array([10.0, -10.0]))
    selected, record = gate_layer(E_L, E_N, mlp, 0.7, GATE_GATING, TRAIN, Rng(1))
    assert np.array_equal(selected, E_L)
    assert np.all(record.sample.choice == 0)


def test_gate_rows_are_branch_rows():
    generator = np.random.default_rng(2)
    E_L, E_N = generator.normal(size=(500, 4)), generator.normal(size=(500, 4))
    mlp = GatingMLP(w=generator.normal(size=(8, 2)), b=np.zeros(2))
    selected, record = gate_layer(E_L, E_N, mlp, 0.7, GATE_GATING, TRAIN, Rng(2))
    linear = np.all(selected == E_L, axis=1)
    nonlinear = np.all(selected == E_N, axis=1)
    assert np.all(linear ^ nonlinear)
    assert np.array_equal(nonlinear, record.sample.choice == 1)
    assert 0 < np.count_nonzero(linear) < 500


def test_training_gate_needs_noise():
    mlp = GatingMLP(w=np.zeros((4, 2)), b=np.zeros(2))
    with pytest.raises(ValueError):
        gate_layer(np.ones((3, 2)), np.ones((3, 2)), mlp, 0.7, GATE_GATING, TRAIN)


def test_eval_mode_is_deterministic(small_adjacency):
    params = init_params(8, 3, 'All', Rng(6))
    first = forward(small_adjacency, params, mode=EVAL)[1]
    second = forward(small_adjacency, params, mode=EVAL)[1]
    assert all(np.array_equal(a, b) for a, b in zip(first.E_G, second.E_G))
    assert all(record.noise is None for record in first.gates.values())


def test_train_mode_is_reproducible(small_adjacency):
    params = init_params(8, 3, 'All', Rng(6))
    first = forward(small_adjacency, params, tau=0.7, rng=Rng(8))[1]
    second = forward(small_adjacency, params, tau=0.7, rng=Rng(8))[1]
    assert all(np.array_equal(a, b) for a, b in zip(first.E_G, second.E_G))


def test_forward_rejects_foreign_parameters(small_adjacency):
    params = init_params(8, 3, 'End', Rng(0))
    with pytest.raises(ConsistencyError):
        forward(small_adjacency, params, variant='All', mode=EVAL)
    with pytest.raises(ShapeError):
        forward(small_adjacency, init_params(9, 3, 'End', Rng(0)), mode=EVAL)


def test_backward_rejects_foreign_trace(small_adjacency):
    params = init_params(8, 3, 'End', Rng(0))
    _, trace = forward(small_adjacency, params, mode=EVAL)
    other = init_params(8, 3, 'All', Rng(0))
    loss_grads = ScoreGrads(users=np.array([0]), items=np.array([0]), grads=np.array([1.0]))
    with pytest.raises(ConsistencyError):
        backward(trace, small_adjacency, other, loss_grads)
    with pytest.raises(ConsistencyError):
        backward(trace, small_adjacency, init_params(8, 2, 'End', Rng(0)), loss_grads)


def test_score_matrix_matches_scores(small_adjacency):
    params = init_params(8, 3, 'Front', Rng(1))
    scores_fn, trace = forward(small_adjacency, params, mode=EVAL)
    matrix = trace.score_matrix()
    users, items = np.meshgrid(np.arange(4), np.arange(4), indexing='ij')
    assert np.allclose(matrix, scores_fn(users.ravel(), items.ravel()).reshape(4, 4), rtol=0, atol=1e-15)
    assert np.allclose(trace.final_embeddings('residual'), sum(trace.E_G) / 5)
    assert trace.final_embeddings() is trace.E_G[-1]


def test_gate_ratios(small_adjacency):
    params = init_params(8, 3, 'End', Rng(1))
    _, trace = forward(small_adjacency, params, tau=0.7, rng=Rng(1))
    log = trace.decisions()
    assert isinstance(log, GateDecisionLog)
    assert log.layers == (3, 4)
    assert log.decisions.shape == (8, 2)
    for row in gate_ratios(log):
        assert row['linear'] + row['nonlinear'] == pytest.approx(100.0)
    table = gate_ratios(log, variant=trace.variant)
    assert [row['layer'] for row in table] == [1, 2, 3, 4]
    assert table[0] == {'layer': 1, 'linear': 100.0, 'nonlinear': 0.0}


def test_forced_variant_gate_ratios(small_adjacency):
    params = init_params(8, 3, 'forced-nonlinear', Rng(1))
    _, trace = forward(small_adjacency, params, mode=EVAL)
    table = gate_ratios(trace.decisions(), variant=trace.variant)
    assert all(row['nonlinear'] == 100.0 for row in table)


@pytest.mark.parametrize('hidden_gate, version', [(False, 1), (True, 2)])
def test_checkpoint_round_trip(tmp_path, hidden_gate, version):
    params = init_params(8, 3, 'Middle', Rng(2), hidden_gate=hidden_gate)
    path = tmp_path / 'model.hmlt'
    identifier = save_checkpoint(path, params, 4, 4)
    payload = path.read_bytes()
    assert payload[:4] == b'HMLT'
    assert struct.unpack_from('<IQQIIB', payload, 4) == (version, 4, 4, 3, 4, VARIANT_NAMES.index('Middle'))
    assert len(identifier) == 16 and identifier == checkpoint_id(payload)

    loaded, loaded_id = load_checkpoint(path, graph_from_splits(train=[[0]] * 4, num_items=4))
    assert loaded_id == identifier
    assert loaded.variant == params.variant
    assert all(np.array_equal(a, b) for a, b in zip(loaded.arrays(), params.arrays()))


def test_checkpoint_embeddings_layout():
    params = init_params(2, 2, 'forced-linear', Rng(0))
    payload = dumps(params, 1, 1)
    assert len(payload) == HEADER.size + 4 * 8
    assert np.array_equal(np.frombuffer(payload[HEADER.size:], dtype='<f8'), params.embeddings.ravel())


def test_checkpoint_id_is_stable():
    params = init_params(8, 3, 'End', Rng(3))
    assert checkpoint_id(dumps(params, 4, 4)) == checkpoint_id(dumps(params.copy(), 4, 4))


@pytest.mark.parametrize('corrupt', [
    lambda payload: b'XXXX' + payload[4:],
    lambda payload: payload[:HEADER.size - 1],
    lambda payload: payload[:-8],
    lambda payload: payload[:4] + struct.pack('<I', 9) + payload[8:],
    lambda payload: payload[:32] + bytes([200]) + payload[33:],
])
def test_corrupt_checkpoint(corrupt):
    payload = dumps(init_params(8, 3, 'End', Rng(3)), 4, 4)
    with pytest.raises(CheckpointError):
        loads(corrupt(payload))


def test_checkpoint_dataset_mismatch(tmp_path):
    path = tmp_path / 'model.hmlt'
    save_checkpoint(path, init_params(8, 3, 'End', Rng(3)), 4, 4)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, graph_from_splits(train=[[0]] * 3, num_items=5))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / 'missing.hmlt')
