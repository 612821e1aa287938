"""
Top-k recommendation metrics over the held-out interactions.

Candidates for a user are all items except those seen in training, and for the test split also
those seen in validation. Ranking is by descending score, ties go to the lower item index.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from hmlet.graph import build_adjacency
from hmlet.model import EVAL, forward
from hmlet.numerics import LEAKY_RELU
from hmlet.utils import eval_chunk_size

logger = logging.getLogger(__name__)

DEFAULT_K = 20
EVAL_SPLITS = ('val', 'test')


@dataclass
class MetricsReport:
    k: int
    split: str
    ndcg: float
    recall: float
    precision: float
    users: np.ndarray = field(repr=False)
    per_user_ndcg: np.ndarray = field(repr=False)
    per_user_recall: np.ndarray = field(repr=False)
    per_user_precision: np.ndarray = field(repr=False)

    @property
    def num_users_evaluated(self):
        return len(self.users)

    def as_dict(self, **extra):
        report = {
            'k': self.k,
            'split': self.split,
            'ndcg': self.ndcg,
            'recall': self.recall,
            'precision': self.precision,
            'num_users': self.num_users_evaluated,
        }
        report.update(extra)
        return report


def _check_k(k):
    if k < 1:
        raise ValueError(f"The cutoff k must be at least 1, got {k}.")


def ndcg_at_k(ranked, relevant, k):
    _check_k(k)
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / np.log2(position + 1) for position, item in enumerate(ranked[:k], start=1) if item in relevant)
    idcg = sum(1.0 / np.log2(position + 1) for position in range(1, min(k, len(relevant)) + 1))
    return float(dcg / idcg)


def recall_at_k(ranked, relevant, k):
    _check_k(k)
    relevant = set(relevant)
    if not relevant:
        return 0.0
    return len(relevant.intersection(ranked[:k])) / len(relevant)


def precision_at_k(ranked, relevant, k):
    _check_k(k)
    return len(set(relevant).intersection(ranked[:k])) / k


def _top_k(rows, users, graph, split, k):
    """Mask excluded candidates of every row and return the ranked top-k item lists."""
    rows = np.array(rows, dtype=np.float64)
    for row, user in zip(rows, users):
        row[graph.excluded_items(user, split)] = -np.inf
    order = np.argsort(-rows, axis=1, kind='stable')[:, :k]
    ranked = []
    for row, top in zip(rows, order):
        ranked.append(top[row[top] > -np.inf].tolist())
    return ranked


def rank_items(scores_fn, graph, u, k, split='test'):
    """Top-k candidate items for user ``u`` under the scoring function ``scores_fn(users, items)``."""
    _check_k(k)
    items = np.arange(graph.num_items)
    row = scores_fn(np.full(graph.num_items, u), items)
    return _top_k(row[np.newaxis, :], [u], graph, split, k)[0]


def _chunk_metrics(scores, graph, split, k, users):
    rows = scores[users] if isinstance(scores, np.ndarray) else scores(users)
    relevant_sets = graph.get_split(split)
    metrics = []
    for user, ranked in zip(users, _top_k(rows, users, graph, split, k)):
        relevant = relevant_sets[user].tolist()
        metrics.append((ndcg_at_k(ranked, relevant, k), recall_at_k(ranked, relevant, k), precision_at_k(ranked, relevant, k)))
    return metrics


def score_report(scores, graph, split, k=DEFAULT_K, users=None, workers=1):
    """
    Compute the metrics for an explicit score matrix (|U| × |I|) or a callable which maps an
    array of users onto their score rows. Users without interactions in ``split`` are skipped.
    """
    _check_k(k)
    if split not in EVAL_SPLITS:
        raise ValueError(f"Cannot evaluate on split '{split}', expected one of {', '.join(EVAL_SPLITS)}.")
    held_out = graph.get_split(split)
    if users is None:
        users = np.arange(graph.num_users)
    users = np.array([u for u in users if len(held_out[u])], dtype=np.int64)

    chunk_size = eval_chunk_size()
    chunks = [users[start:start + chunk_size] for start in range(0, len(users), chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(lambda chunk: _chunk_metrics(scores, graph, split, k, chunk), chunks))
    else:
        results = [_chunk_metrics(scores, graph, split, k, chunk) for chunk in chunks]
    per_user = np.array([m for chunk in results for m in chunk], dtype=np.float64).reshape(-1, 3)

    means = per_user.mean(axis=0) if len(per_user) else np.zeros(3)
    report = MetricsReport(
        k=k,
        split=split,
        ndcg=float(means[0]),
        recall=float(means[1]),
        precision=float(means[2]),
        users=users,
        per_user_ndcg=per_user[:, 0],
        per_user_recall=per_user[:, 1],
        per_user_precision=per_user[:, 2],
    )
    logger.debug("Evaluated %d users on %s: NDCG@%d=%.5f", len(users), split, k, report.ndcg)
    return report


def evaluate(params, graph, split='test', k=DEFAULT_K, activation=LEAKY_RELU, adj=None, workers=1):
    """Run one evaluation-mode forward pass and rank every user's candidates."""
    if adj is None:
        adj = build_adjacency(graph)
    _, trace = forward(adj, params, mode=EVAL, phi=activation)
    return score_report(trace.score_matrix, graph, split, k, workers=workers)
