"""
BPR training of the propagation model: uniform negative sampling, edge dropout on the adjacency,
annealed Gumbel temperature, Adam and early stopping on the validation NDCG.
"""
import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp
from django.core.exceptions import ImproperlyConfigured
from scipy.special import expit

from hmlet.evaluator import DEFAULT_K, score_report
from hmlet.exceptions import DatasetError, EmptyDatasetError, ShapeError, TrainingDivergedError
from hmlet.graph import NormalizedAdjacency, build_adjacency
from hmlet.model import EVAL, TRAIN, ScoreGrads, backward, forward, gate_ratios, init_params, layer_plan
from hmlet.numerics import ACTIVATIONS, LEAKY_RELU, Rng

logger = logging.getLogger(__name__)

SCHEDULE_EPOCH = 'epoch'
SCHEDULE_ITERATION = 'iteration'
TEMPERATURE_SCHEDULES = (SCHEDULE_EPOCH, SCHEDULE_ITERATION)

ITERATION_TAU0 = 1.0
ITERATION_DECAY = 0.001


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    lambda_l2: float = 1e-4
    batch_size: int = 2048
    dropout_rate: float = 0.4
    tau0: float = 0.7
    tau_min: float = 0.01
    tau_decay: float = 0.995
    max_epochs: int = 1000
    patience: int = 20
    dim: int = 512
    seed: int = 0
    variant: str = 'End'
    activation: str = LEAKY_RELU
    hidden_gate: bool = False
    temperature_schedule: str = SCHEDULE_EPOCH
    eval_k: int = DEFAULT_K
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ImproperlyConfigured("learning_rate must not be negative.")
        if not self.lambda_l2 >= 0:
            raise ImproperlyConfigured("lambda_l2 must not be negative.")
        if not 0 <= self.dropout_rate < 1:
            raise ImproperlyConfigured("dropout_rate must lie in [0, 1).")
        if not self.tau0 >= self.tau_min > 0:
            raise ImproperlyConfigured("Temperatures must satisfy tau0 >= tau_min > 0.")
        if not 0 < self.tau_decay <= 1:
            raise ImproperlyConfigured("tau_decay must lie in (0, 1].")
        for name in ('batch_size', 'max_epochs', 'patience', 'dim', 'eval_k', 'threads'):
            if getattr(self, name) < 1:
                raise ImproperlyConfigured(f"{name} must be a positive integer.")
        if self.activation not in ACTIVATIONS:
            raise ImproperlyConfigured(f"Unknown activation '{self.activation}'.")
        if self.temperature_schedule not in TEMPERATURE_SCHEDULES:
            raise ImproperlyConfigured(f"Unknown temperature schedule '{self.temperature_schedule}'.")
        layer_plan(self.variant)

    @classmethod
    def field_names(cls):
        return tuple(f.name for f in fields(cls))

    def as_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    """First and second moment estimates for every trainable array, in :meth:`ModelParams.arrays` order."""
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params):
        arrays = params.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays])

    def step(self, params, grads, learning_rate):
        """Update the parameter arrays in place."""
        arrays, grad_arrays = params.arrays(), grads.arrays()
        if len(arrays) != len(self.m) or len(grad_arrays) != len(self.m):
            raise ShapeError(f"Adam tracks {len(self.m)} arrays, got {len(arrays)} parameters and {len(grad_arrays)} gradients.")
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for param, grad, m, v in zip(arrays, grad_arrays, self.m, self.v):
            if param.shape != grad.shape or param.shape != m.shape:
                raise ShapeError(f"Parameter of shape {param.shape} received a gradient of shape {grad.shape}.")
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


@dataclass(frozen=True)
class Triplet:
    u: int
    i: int
    j: int


@dataclass(frozen=True)
class TripletBatch:
    users: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.users)

    def __getitem__(self, index):
        return Triplet(int(self.users[index]), int(self.positives[index]), int(self.negatives[index]))

    def __iter__(self):
        return (self[index] for index in range(len(self)))


def sample_batch(graph, batch_size, rng):
    """
    Draw (user, positive) uniformly among the training pairs and a negative item uniformly among
    the items the user has not interacted with in training. Users who interacted with every item
    cannot yield a negative and are skipped.
    """
    users, items = graph.train_pairs
    if len(users) == 0:
        raise EmptyDatasetError("Cannot sample triplets without training interactions.")
    eligible = np.flatnonzero(graph.user_degree[users] < graph.num_items)
    if len(eligible) == 0:
        raise DatasetError("Every user interacted with every item, no negative can be sampled.")
    picked = eligible[rng.integers(len(eligible), batch_size)]
    batch_users, positives = users[picked], items[picked]

    keys = graph.train_keys
    negatives = rng.integers(graph.num_items, batch_size)
    rejected = np.flatnonzero(np.isin(batch_users * graph.num_items + negatives, keys))
    while len(rejected):
        negatives[rejected] = rng.integers(graph.num_items, len(rejected))
        still = np.isin(batch_users[rejected] * graph.num_items + negatives[rejected], keys)
        rejected = rejected[still]
    return TripletBatch(users=batch_users, positives=positives, negatives=negatives)


@dataclass(frozen=True)
class BPRLoss:
    total: float
    ranking: float
    regularization: float
    d_positive: np.ndarray
    d_negative: np.ndarray


def bpr_loss(positive, negative, reg_terms=0.0):
    """
    Mean of ``-ln σ(r_ui - r_uj)`` over the batch plus the precomputed regularization value.
    Returns the loss parts and the derivatives with respect to both score vectors.
    """
    positive = np.asarray(positive, dtype=np.float64)
    negative = np.asarray(negative, dtype=np.float64)
    if positive.shape != negative.shape:
        raise ShapeError(f"Score vectors differ in shape: {positive.shape} and {negative.shape}.")
    batch = max(len(positive), 1)
    delta = positive - negative
    ranking = float(np.mean(np.logaddexp(0.0, -delta))) if len(delta) else 0.0
    slope = expit(-delta) / batch
    return BPRLoss(
        total=ranking + reg_terms,
        ranking=ranking,
        regularization=float(reg_terms),
        d_positive=-slope,
        d_negative=slope,
    )


def l2_penalty(params, batch, lambda_l2, num_users):
    """
    ``λ·mean_b(‖e_u‖² + ‖e_i‖² + ‖e_j‖²) + λ·Σ‖gating parameters‖²`` over the initial embeddings
    of the batch, together with its gradient as a :class:`ParamGrads`-shaped list of arrays.
    """
    rows = np.concatenate([batch.users, num_users + batch.positives, num_users + batch.negatives])
    E = params.embeddings
    size = max(len(batch), 1)
    value = lambda_l2 * float(np.sum(E[rows] ** 2)) / size
    d_embeddings = np.zeros_like(E)
    np.add.at(d_embeddings, rows, (2.0 * lambda_l2 / size) * E[rows])
    gating = params.gating_arrays()
    value += lambda_l2 * sum(float(np.sum(p ** 2)) for p in gating)
    return value, [d_embeddings, *(2.0 * lambda_l2 * p for p in gating)]


def temperature(epoch, cfg, iteration=None):
    if epoch < 0:
        raise ValueError("The epoch must not be negative.")
    if cfg.temperature_schedule == SCHEDULE_ITERATION:
        return max(cfg.tau_min, ITERATION_TAU0 * math.exp(-ITERATION_DECAY * (iteration or 0)))
    return max(cfg.tau_min, cfg.tau0 * cfg.tau_decay ** epoch)


def edge_dropout(adj, rate, rng):
    """
    Keep every user-item edge with probability ``1 - rate``, mirrored in both directions, and
    scale the kept weights by ``1 / (1 - rate)``.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"The dropout rate must lie in [0, 1), got {rate}.")
    if rate == 0:
        return adj
    block = adj.user_item_block().tocoo()
    keep = rng.uniform(block.nnz) < 1.0 - rate
    kept = sp.csr_matrix(
        (block.data[keep] / (1.0 - rate), (block.row[keep], block.col[keep])),
        shape=block.shape,
    )
    return NormalizedAdjacency.from_block(adj.num_users, adj.num_items, kept)


def _accumulate(grads, extra):
    for grad, more in zip(grads.arrays(), extra):
        grad += more


def train(graph, cfg, variant=None, on_epoch=None, on_improvement=None):
    """
    Optimize a fresh set of parameters for ``graph``.

    After each epoch the model is evaluated on the validation split; ``on_epoch`` receives the
    epoch record and ``on_improvement`` the parameter snapshot with a new best validation NDCG.
    Returns the best parameters and the list of epoch records.
    """
    variant = layer_plan(variant or cfg.variant)
    if graph.num_train == 0:
        raise EmptyDatasetError("Cannot train without training interactions.")
    rng = Rng(cfg.seed)
    negatives_rng, gumbel_rng, dropout_rng = rng.stream('negatives'), rng.stream('gumbel'), rng.stream('dropout')
    adj = build_adjacency(graph)
    params = init_params(graph.num_nodes, cfg.dim, variant, rng.stream('init'), hidden_gate=cfg.hidden_gate)
    adam = AdamState.for_params(params)
    num_batches = math.ceil(graph.num_train / cfg.batch_size)
    logger.info("Training %s on %d users, %d items, %d training pairs in %d batches per epoch",
                variant, graph.num_users, graph.num_items, graph.num_train, num_batches)

    best, best_ndcg, since_best, iteration = params.copy(), -np.inf, 0, 0
    history = []
    for epoch in range(cfg.max_epochs):
        tau = temperature(epoch, cfg)
        totals = np.zeros(3)
        for batch_number in range(num_batches):
            if cfg.temperature_schedule == SCHEDULE_ITERATION:
                tau = temperature(epoch, cfg, iteration)
            batch = sample_batch(graph, cfg.batch_size, negatives_rng)
            dropped = edge_dropout(adj, cfg.dropout_rate, dropout_rng)
            scores_fn, trace = forward(dropped, params, variant, tau, TRAIN, gumbel_rng, cfg.activation)
            reg_value, reg_grads = l2_penalty(params, batch, cfg.lambda_l2, graph.num_users)
            loss = bpr_loss(scores_fn(batch.users, batch.positives), scores_fn(batch.users, batch.negatives), reg_value)
            if not np.isfinite(loss.total):
                raise TrainingDivergedError(epoch, batch_number, tau, loss.total)
            score_grads = ScoreGrads.from_triplets(batch.users, batch.positives, batch.negatives,
                                                   loss.d_positive, loss.d_negative)
            grads = backward(trace, dropped, params, score_grads)
            _accumulate(grads, reg_grads)
            adam.step(params, grads, cfg.learning_rate)
            totals += (loss.total, loss.ranking, loss.regularization)
            iteration += 1
            logger.debug("epoch %d batch %d: loss %.6f tau %.5f", epoch, batch_number, loss.total, tau)

        _, eval_trace = forward(adj, params, variant, tau, EVAL, phi=cfg.activation)
        report = score_report(eval_trace.score_matrix, graph, 'val', cfg.eval_k, workers=cfg.threads)
        improved = report.ndcg > best_ndcg
        totals /= num_batches
        record = {
            'epoch': epoch,
            'loss': float(totals[0]),
            'ranking_loss': float(totals[1]),
            'reg_loss': float(totals[2]),
            'tau': tau,
            'val': {'ndcg': report.ndcg, 'recall': report.recall, 'precision': report.precision},
            'gate_ratios': gate_ratios(eval_trace.decisions(), variant=variant),
            'best': improved,
        }
        history.append(record)
        logger.info("epoch %d: loss %.6f, tau %.5f, val NDCG@%d %.5f, gates %s", epoch, record['loss'], tau,
                    cfg.eval_k, report.ndcg,
                    ' '.join(f"{r['layer']}:{r['linear']:.1f}/{r['nonlinear']:.1f}" for r in record['gate_ratios']))
        if on_epoch:
            on_epoch(record)
        if improved:
            best, best_ndcg, since_best = params.copy(), report.ndcg, 0
            if on_improvement:
                on_improvement(best, record)
        else:
            since_best += 1
            if since_best >= cfg.patience:
                logger.info("No validation improvement for %d epochs, stopping after epoch %d", since_best, epoch)
                break
    return best, history
