import pytest

import json

import networkx as nx
import numpy as np
import scipy.sparse as sp

from hmlet.analysis import (
    CLASSES, FL, FNL, PNL, CentralityReport, NodeClasses, analyze, betweenness, box_summary, class_report,
    classify_nodes, closeness, compute_centralities, cosine_similarities, degree_bins, interaction_network,
    neighbour_similarity, pagerank,
)
from hmlet.exceptions import AnalysisError, ConvergenceError
from hmlet.graph import RawInteractions, split
from hmlet.model import GateDecisionLog, init_params
from hmlet.numerics import Rng
from hmlet.trainer import TrainConfig, train
from hmlet.utils import dump_json

from .conftest import two_block_pairs


def path_network(n):
    dense = np.zeros((n, n))
    for v in range(n - 1):
        dense[v, v + 1] = dense[v + 1, v] = 1.0
    return sp.csr_matrix(dense)


def random_network(seed, n=30, density=0.1):
    generator = np.random.default_rng(seed)
    upper = np.triu(generator.random((n, n)) < density, k=1)
    dense = (upper | upper.T).astype(np.float64)
    return dense, sp.csr_matrix(dense)


def uniform_classes(n, name, num_users=0):
    return NodeClasses(labels=np.full(n, CLASSES.index(name), dtype=np.int8), num_users=num_users)


@pytest.fixture(scope='module')
def community_graph():
    return split(RawInteractions(pairs=tuple(two_block_pairs(seed=3, num_users=60, num_items=60))), seed=1)


def test_classify_nodes():
    log = GateDecisionLog(layers=(3, 4), decisions=np.array([[1, 1], [0, 0], [0, 1], [1, 0]], dtype=np.int8),
                          num_users=2)
    classes = classify_nodes(log)
    assert [classes[node] for node in range(4)] == [FNL, FL, PNL, PNL]
    assert classes.sizes() == {FNL: 25.0, PNL: 50.0, FL: 25.0}
    assert classes.members(PNL).tolist() == [2, 3]


def test_classify_single_gate():
    log = GateDecisionLog(layers=(4,), decisions=np.array([[1], [0]], dtype=np.int8))
    classes = classify_nodes(log)
    assert [classes[0], classes[1]] == [FNL, FL]


@pytest.mark.parametrize('log', [
    np.zeros((3, 2)),
    GateDecisionLog(layers=(), decisions=np.zeros((3, 0), dtype=np.int8)),
    GateDecisionLog(layers=(3, 4), decisions=np.array([[0, -1]], dtype=np.int8)),
])
def test_classify_rejects_unusable_logs(log):
    with pytest.raises(AnalysisError):
        classify_nodes(log)


def test_pagerank_two_nodes():
    assert pagerank(path_network(2)) == pytest.approx([0.5, 0.5])


def test_pagerank_matches_dense_solution():
    dense, _ = random_network(4)
    dense[5] = dense[:, 5] = 0.0
    network = sp.csr_matrix(dense)
    n = len(dense)
    degree = dense.sum(axis=1)
    columns = np.where(degree[:, None] > 0, dense / np.maximum(degree[:, None], 1), 1.0 / n).T
    expected = np.linalg.solve(np.eye(n) - 0.85 * columns, np.full(n, 0.15 / n))
    scores = pagerank(network)
    assert scores.sum() == pytest.approx(1.0)
    assert np.allclose(scores, expected / expected.sum(), rtol=0, atol=1e-9)
    reference = nx.pagerank(nx.from_numpy_array(dense), alpha=0.85, tol=1e-13)
    assert np.allclose(scores, [reference[v] for v in range(n)], rtol=0, atol=1e-8)


def test_pagerank_star():
    dense = np.zeros((5, 5))
    dense[0, 1:] = dense[1:, 0] = 1.0
    scores = pagerank(sp.csr_matrix(dense))
    assert scores[0] > scores[1]
    assert np.allclose(scores[1:], scores[1])
    assert scores.sum() == pytest.approx(1.0)


def test_pagerank_budget():
    dense = np.zeros((5, 5))
    dense[0, 1:] = dense[1:, 0] = 1.0
    with pytest.raises(ConvergenceError):
        pagerank(sp.csr_matrix(dense), max_iter=1)


def test_betweenness_hand_values():
    assert betweenness(path_network(3)).tolist() == [0.0, 1.0, 0.0]
    assert betweenness(path_network(2)).tolist() == [0.0, 0.0]


def test_closeness_hand_values():
    assert closeness(path_network(3)) == pytest.approx([2 / 3, 1.0, 2 / 3])
    network = sp.block_diag([path_network(2), sp.csr_matrix((1, 1))]).tocsr()
    assert closeness(network) == pytest.approx([0.5, 0.5, 0.0])


@pytest.mark.parametrize('seed', range(50))
def test_path_centralities_match_networkx(seed):
    dense, network = random_network(seed, n=3 + seed % 48)
    reference_graph = nx.from_numpy_array(dense)
    reference_betweenness = nx.betweenness_centrality(reference_graph, normalized=True)
    reference_closeness = nx.closeness_centrality(reference_graph, wf_improved=True)
    n = len(dense)
    assert np.allclose(betweenness(network), [reference_betweenness[v] for v in range(n)], rtol=0, atol=1e-12)
    assert np.allclose(closeness(network), [reference_closeness[v] for v in range(n)], rtol=0, atol=1e-12)


def test_workers_match_serial():
    _, network = random_network(7, n=40)
    assert np.allclose(betweenness(network, workers=3), betweenness(network), rtol=0, atol=1e-12)
    assert np.array_equal(closeness(network, workers=3), closeness(network))


def test_non_square_network():
    with pytest.raises(AnalysisError):
        pagerank(sp.csr_matrix((2, 3)))


def test_interaction_network(small_graph):
    network = interaction_network(small_graph)
    assert network.shape == (8, 8)
    assert network.nnz == 2 * small_graph.num_train
    assert (network != network.T).nnz == 0
    centralities = compute_centralities(network)
    assert centralities.degree.tolist() == [2.0] * 8


def test_box_summary():
    summary = box_summary([1, 2, 3, 4, 100])
    assert summary['median'] == 3.0
    assert (summary['q1'], summary['q3']) == (2.0, 4.0)
    assert (summary['min_whisker'], summary['max_whisker']) == (1.0, 4.0)
    assert summary['count'] == 5
    assert box_summary([]) is None


def test_degree_bins_partition():
    degree = np.array([5, 1, 3, 3, 2, 8, 1, 0, 4, 7, 6, 2], dtype=np.float64)
    labels = np.array([0, 1, 2] * 4, dtype=np.int8)
    bins = degree_bins(NodeClasses(labels=labels, num_users=0), degree)
    assert len(bins) == 10
    assert sum(entry['count'] for entry in bins) == 12
    assert bins[0]['min_degree'] == 0.0 and bins[-1]['max_degree'] == 8.0
    for entry in bins:
        assert sum(entry['ratios'].values()) == pytest.approx(100.0)
    maxima = [entry['max_degree'] for entry in bins]
    assert maxima == sorted(maxima)


def test_cosine_similarities():
    embeddings = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0], [0.0, 3.0]])
    similarity = cosine_similarities(embeddings, np.array([0, 0, 1]), np.array([0, 1, 0]), 2)
    assert similarity.tolist() == [1.0, 0.0, 0.0]


def test_neighbour_similarity_counts_both_endpoints(small_graph):
    embeddings = np.random.default_rng(0).normal(size=(8, 3))
    summary = neighbour_similarity(uniform_classes(8, PNL), small_graph, embeddings)
    assert summary[PNL]['count'] == 2 * small_graph.num_train
    assert -1.0 <= summary[PNL]['mean'] <= 1.0
    assert summary[FNL] == {'count': 0, 'mean': None, 'variance': None}


def test_class_report_single_class(small_graph):
    classes = uniform_classes(8, FL, num_users=4)
    centralities = compute_centralities(interaction_network(small_graph))
    report = class_report(classes, centralities, small_graph, np.ones((8, 2)))
    assert report.class_sizes == {FNL: 0.0, PNL: 0.0, FL: 100.0}
    assert report.class_sizes_by_type['users'][FL] == 100.0
    assert report.centralities['degree'][FNL] is None
    assert report.centralities['pagerank'][FL]['count'] == 8
    assert report.similarity[FL]['mean'] == pytest.approx(1.0)
    assert report.gate_ratios == []


def test_class_report_rejects_mismatched_nodes(small_graph):
    centralities = CentralityReport(*(np.zeros(8) for _ in range(4)))
    with pytest.raises(AnalysisError):
        class_report(uniform_classes(7, FL), centralities, small_graph, np.ones((8, 2)))
    with pytest.raises(AnalysisError):
        class_report(uniform_classes(8, FL), centralities, small_graph, np.ones((6, 2)))


def test_analyze_trained_model(community_graph):
    params, _ = train(community_graph, TrainConfig(variant='End', dim=8, batch_size=256, max_epochs=3))
    report = analyze(params, community_graph)
    assert sum(report.class_sizes.values()) == pytest.approx(100.0)
    assert sum(entry['count'] for entry in report.degree_bins) == community_graph.num_nodes
    assert set(report.centralities) == {'degree', 'pagerank', 'betweenness', 'closeness'}
    assert [row['layer'] for row in report.gate_ratios] == [1, 2, 3, 4]
    assert report.gate_ratios[0]['linear'] == 100.0
    payload = json.loads(dump_json(report.as_dict(variant='End')))
    assert payload['variant'] == 'End'


def test_analyze_residual_embeddings(community_graph):
    params = init_params(community_graph.num_nodes, 4, 'All', Rng(0))
    report = analyze(params, community_graph, embedding='residual', workers=2)
    assert len(report.gate_ratios) == 4
    for name in CLASSES:
        similarity = report.similarity[name]
        assert similarity['mean'] is None or -1.0 <= similarity['mean'] <= 1.0


def test_analyze_needs_learnt_gates(small_graph):
    with pytest.raises(AnalysisError):
        analyze(init_params(8, 3, 'forced-nonlinear', Rng(0)), small_graph)
