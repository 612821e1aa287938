"""
Which nodes end up non-linear? Nodes are classified by the branches their learnt gates chose,
and the classes are related to the degree, the centralities and the neighbour similarity of
their nodes.

Centralities are computed on the unweighted training graph over all users and items.
"""
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from hmlet.exceptions import AnalysisError, ConvergenceError
from hmlet.graph import build_adjacency
from hmlet.model import EMBEDDING_FINAL, EVAL, GateDecisionLog, forward, gate_ratios
from hmlet.numerics import LEAKY_RELU, LINEAR_BRANCH, NONLINEAR_BRANCH

logger = logging.getLogger(__name__)

FNL = 'FNL'
PNL = 'PNL'
FL = 'FL'
CLASSES = (FNL, PNL, FL)

DAMPING = 0.85
PAGERANK_TOL = 1e-10
PAGERANK_MAX_ITER = 10_000
NUM_DEGREE_BINS = 10
WHISKER = 1.5
CENTRALITIES = ('degree', 'pagerank', 'betweenness', 'closeness')


@dataclass(frozen=True)
class NodeClasses:
    """Class index per node, positions into :data:`CLASSES`."""
    labels: np.ndarray
    num_users: int

    def __getitem__(self, node):
        return CLASSES[self.labels[node]]

    def __len__(self):
        return len(self.labels)

    def members(self, name, nodes=None):
        labels = self.labels if nodes is None else self.labels[nodes]
        return np.flatnonzero(labels == CLASSES.index(name))

    def sizes(self, nodes=None):
        """Percentage of nodes per class."""
        labels = self.labels if nodes is None else self.labels[nodes]
        total = max(len(labels), 1)
        return {name: 100.0 * np.count_nonzero(labels == index) / total for index, name in enumerate(CLASSES)}


@dataclass(frozen=True)
class CentralityReport:
    degree: np.ndarray
    pagerank: np.ndarray
    betweenness: np.ndarray
    closeness: np.ndarray

    def get(self, name):
        return getattr(self, name)


@dataclass
class AnalysisReport:
    class_sizes: dict
    class_sizes_by_type: dict
    degree_bins: list
    centralities: dict
    similarity: dict
    gate_ratios: list = field(default_factory=list)

    def as_dict(self, **extra):
        report = {
            'class_sizes': self.class_sizes,
            'class_sizes_by_type': self.class_sizes_by_type,
            'degree_bins': self.degree_bins,
            'centralities': self.centralities,
            'similarity': self.similarity,
            'gate_ratios': self.gate_ratios,
        }
        report.update(extra)
        return report


def classify_nodes(log):
    """FNL if every learnt gate chose non-linear, FL if every one chose linear, PNL otherwise."""
    if not isinstance(log, GateDecisionLog):
        raise AnalysisError(f"Expected a gate decision log, got {type(log).__name__}.")
    if not log.layers:
        raise AnalysisError("The gate decision log holds no learnt gate, there is nothing to classify.")
    decisions = log.decisions
    if decisions.shape[1] != len(log.layers) or np.any(decisions < 0):
        raise AnalysisError("The gate decision log lacks decisions for some nodes.")
    all_nonlinear = np.all(decisions == NONLINEAR_BRANCH, axis=1)
    all_linear = np.all(decisions == LINEAR_BRANCH, axis=1)
    labels = np.full(log.num_nodes, CLASSES.index(PNL), dtype=np.int8)
    labels[all_nonlinear] = CLASSES.index(FNL)
    labels[all_linear] = CLASSES.index(FL)
    return NodeClasses(labels=labels, num_users=log.num_users)


def interaction_network(graph):
    """Unweighted symmetric node matrix holding one entry per training interaction and direction."""
    block = graph.interaction_matrix()
    network = sp.bmat([[None, block], [block.T, None]], format='csr')
    network.sort_indices()
    return network


def _as_network(network):
    network = sp.csr_matrix(network)
    if network.shape[0] != network.shape[1]:
        raise AnalysisError(f"A network must be square, got shape {network.shape}.")
    network.sort_indices()
    return network


def pagerank(network, damping=DAMPING, tol=PAGERANK_TOL, max_iter=PAGERANK_MAX_ITER):
    """
    Power iteration with uniform teleportation. The mass of nodes without edges is spread
    uniformly over all nodes. Iterates until the L1 change drops below ``tol``.
    """
    network = _as_network(network)
    n = network.shape[0]
    if n == 0:
        return np.zeros(0)
    out_degree = np.asarray(network.sum(axis=1)).ravel()
    dangling = out_degree == 0
    inverse = np.divide(1.0, out_degree, out=np.zeros(n), where=~dangling)
    transition = (sp.diags(inverse) @ network).T.tocsr()
    x = np.full(n, 1.0 / n)
    for iteration in range(1, max_iter + 1):
        previous = x
        x = damping * (transition @ previous + previous[dangling].sum() / n) + (1.0 - damping) / n
        x /= x.sum()
        if np.abs(x - previous).sum() < tol:
            logger.debug("PageRank converged after %d iterations", iteration)
            return x
    raise ConvergenceError(f"PageRank did not converge within {max_iter} iterations.")


def _bfs(indptr, indices, source, n):
    """Distances, shortest path counts, predecessors and the visiting order from ``source``."""
    distance = np.full(n, -1, dtype=np.int64)
    sigma = np.zeros(n)
    predecessors = [[] for _ in range(n)]
    order = []
    distance[source], sigma[source] = 0, 1.0
    queue = deque([source])
    while queue:
        v = queue.popleft()
        order.append(v)
        for w in indices[indptr[v]:indptr[v + 1]]:
            if distance[w] < 0:
                distance[w] = distance[v] + 1
                queue.append(w)
            if distance[w] == distance[v] + 1:
                sigma[w] += sigma[v]
                predecessors[w].append(v)
    return distance, sigma, predecessors, order


def _betweenness_chunk(indptr, indices, sources, n):
    total = np.zeros(n)
    for s in sources:
        _, sigma, predecessors, order = _bfs(indptr, indices, s, n)
        dependency = np.zeros(n)
        for w in reversed(order):
            for v in predecessors[w]:
                dependency[v] += sigma[v] / sigma[w] * (1.0 + dependency[w])
            if w != s:
                total[w] += dependency[w]
    return total


def _closeness_chunk(indptr, indices, sources, n):
    values = np.zeros(len(sources))
    for position, s in enumerate(sources):
        distance = _bfs(indptr, indices, s, n)[0]
        reached = distance > 0
        total = distance[reached].sum()
        if total > 0 and n > 1:
            r = np.count_nonzero(reached)
            values[position] = (r / total) * (r / (n - 1))
    return values


def _fan_out(function, network, workers):
    """Run ``function`` over chunks of source nodes, in a process pool when ``workers > 1``."""
    network = _as_network(network)
    n = network.shape[0]
    indptr, indices = network.indptr, network.indices
    chunks = [chunk for chunk in np.array_split(np.arange(n), max(workers, 1)) if len(chunk)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(function, indptr, indices, chunk, n) for chunk in chunks]
            return n, [future.result() for future in futures]
    return n, [function(indptr, indices, chunk, n) for chunk in chunks]


def betweenness(network, workers=1):
    """
    Brandes' accumulation over breadth-first shortest paths. For undirected networks every pair
    is counted from both ends, hence the halving before normalizing by ``2/((n-1)(n-2))``.
    """
    n, partials = _fan_out(_betweenness_chunk, network, workers)
    raw = np.sum(partials, axis=0) / 2.0 if partials else np.zeros(n)
    if n <= 2:
        return raw
    return raw * 2.0 / ((n - 1) * (n - 2))


def closeness(network, workers=1):
    """
    Wasserman-Faust closeness: ``(r/Σd)·(r/(n-1))`` with ``r`` the number of nodes reachable from
    a node. Nodes without edges score 0.
    """
    n, partials = _fan_out(_closeness_chunk, network, workers)
    return np.concatenate(partials) if partials else np.zeros(n)


def compute_centralities(network, workers=1, damping=DAMPING, tol=PAGERANK_TOL):
    network = _as_network(network)
    scores = {'degree': np.diff(network.indptr).astype(np.float64)}
    for name, function in (('pagerank', lambda: pagerank(network, damping, tol)),
                           ('betweenness', lambda: betweenness(network, workers)),
                           ('closeness', lambda: closeness(network, workers))):
        start = time.perf_counter()
        scores[name] = function()
        logger.info("Computed %s for %d nodes in %.2fs", name, network.shape[0], time.perf_counter() - start)
    return CentralityReport(**scores)


def box_summary(values):
    """Quartiles and the whiskers of the 1.5·IQR rule, or ``None`` for an empty sample."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return None
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - WHISKER * iqr) & (values <= q3 + WHISKER * iqr)]
    return {
        'count': len(values),
        'mean': float(values.mean()),
        'min_whisker': float(inside.min()),
        'q1': float(q1),
        'median': float(median),
        'q3': float(q3),
        'max_whisker': float(inside.max()),
    }


def degree_bins(classes, degree, num_bins=NUM_DEGREE_BINS):
    """
    Split the nodes into ``num_bins`` rank-based bins (stable order by degree, then node index)
    and report the class ratios in every bin.
    """
    n = len(degree)
    order = np.lexsort((np.arange(n), degree))
    bins = []
    for b in range(num_bins):
        nodes = order[b * n // num_bins:(b + 1) * n // num_bins]
        counts = {name: int(np.count_nonzero(classes.labels[nodes] == index)) for index, name in enumerate(CLASSES)}
        entry = {
            'bin': b + 1,
            'count': len(nodes),
            'min_degree': float(degree[nodes].min()) if len(nodes) else None,
            'max_degree': float(degree[nodes].max()) if len(nodes) else None,
            'counts': counts,
            'ratios': classes.sizes(nodes) if len(nodes) else dict.fromkeys(CLASSES, 0.0),
        }
        bins.append(entry)
    return bins


def cosine_similarities(embeddings, users, items, num_users):
    """Cosine similarity of both endpoints for every training edge, 0 where a norm vanishes."""
    left, right = embeddings[users], embeddings[num_users + items]
    norms = np.linalg.norm(left, axis=1) * np.linalg.norm(right, axis=1)
    dots = np.einsum('nd,nd->n', left, right)
    similarity = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.clip(similarity, -1.0, 1.0)


def neighbour_similarity(classes, graph, embeddings):
    """Per class mean and variance of the similarity between nodes and their training neighbours."""
    users, items = graph.train_pairs
    similarity = cosine_similarities(embeddings, users, items, graph.num_users)
    endpoint_nodes = np.concatenate([users, graph.num_users + items])
    endpoint_similarity = np.concatenate([similarity, similarity])
    summary = {}
    for index, name in enumerate(CLASSES):
        values = endpoint_similarity[classes.labels[endpoint_nodes] == index]
        summary[name] = {
            'count': len(values),
            'mean': float(values.mean()) if len(values) else None,
            'variance': float(values.var()) if len(values) else None,
        }
    return summary


def class_report(classes, centralities, graph, embeddings, log=None, variant=None):
    if len(classes) != graph.num_nodes or len(centralities.degree) != graph.num_nodes:
        raise AnalysisError("Classes, centralities and graph do not cover the same nodes.")
    if embeddings.shape[0] != graph.num_nodes:
        raise AnalysisError(f"Embeddings of {embeddings.shape[0]} rows do not cover {graph.num_nodes} nodes.")
    user_nodes = np.arange(graph.num_users)
    item_nodes = np.arange(graph.num_users, graph.num_nodes)
    summaries = {}
    for name in CENTRALITIES:
        values = centralities.get(name)
        summaries[name] = {cls: box_summary(values[classes.members(cls)]) for cls in CLASSES}
    return AnalysisReport(
        class_sizes=classes.sizes(),
        class_sizes_by_type={'users': classes.sizes(user_nodes), 'items': classes.sizes(item_nodes)},
        degree_bins=degree_bins(classes, centralities.degree),
        centralities=summaries,
        similarity=neighbour_similarity(classes, graph, embeddings),
        gate_ratios=gate_ratios(log, variant=variant) if log is not None else [],
    )


def analyze(params, graph, activation=LEAKY_RELU, embedding=EMBEDDING_FINAL, workers=1):
    """Classify the nodes of trained ``params`` by their evaluation-mode gates and relate the classes to the graph."""
    if not params.variant.gated_layers:
        raise AnalysisError(f"Variant '{params.variant}' has no learnt gate to analyze.")
    _, trace = forward(build_adjacency(graph), params, mode=EVAL, phi=activation)
    log = trace.decisions()
    classes = classify_nodes(log)
    centralities = compute_centralities(interaction_network(graph), workers)
    return class_report(classes, centralities, graph, trace.final_embeddings(embedding), log, params.variant)
