"""
The hybrid linear/non-linear propagation model.

Every layer computes a linear embedding (symmetric neighbour aggregation) and a non-linear one
(the same aggregation passed through an activation, or the previous non-linear state when the
layer bypasses). A per-layer gate then picks one of both for every node, either fixed by the
layer plan or learnt by a small MLP with straight-through Gumbel-softmax. Scores are the
residual sum of the per-layer dot products.

The backward pass is written out by hand; :func:`backward` mirrors :func:`forward` layer by layer.
"""
import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from django.core.exceptions import ImproperlyConfigured

from hmlet.exceptions import ConsistencyError, ShapeError
from hmlet.numerics import (
    LEAKY_RELU, LINEAR_BRANCH, NONLINEAR_BRANCH, GateSample, activation, activation_grad, gumbel_sample,
    one_hot, softmax, softmax_backward, spmm, stgs,
)

logger = logging.getLogger(__name__)

NUM_LAYERS = 4

BYPASS = 'bypass'
PROPAGATE = 'propagate'

GATE_LINEAR = 'linear'
GATE_NONLINEAR = 'non-linear'
GATE_GATING = 'gating'

TRAIN = 'train'
EVAL = 'eval'

EMBEDDING_FINAL = 'final'
EMBEDDING_RESIDUAL = 'residual'

INIT_STD = 0.1


@dataclass(frozen=True)
class LayerPlan:
    mode: str
    gate: str


@dataclass(frozen=True)
class VariantSpec:
    name: str
    layers: tuple

    @property
    def gated_layers(self):
        """One-based numbers of the layers whose gate is learnt."""
        return tuple(i for i, plan in enumerate(self.layers, start=1) if plan.gate == GATE_GATING)

    @property
    def tag(self):
        return VARIANT_NAMES.index(self.name)

    def __str__(self):
        return self.name


def _plan(*entries):
    return tuple(LayerPlan(mode, gate) for mode, gate in entries)


_GATED = (PROPAGATE, GATE_GATING)
_LINEAR = (BYPASS, GATE_LINEAR)

VARIANTS = {
    'All': _plan(_GATED, _GATED, _GATED, _GATED),
    'Front': _plan(_GATED, _GATED, _LINEAR, _LINEAR),
    'Middle': _plan(_LINEAR, _GATED, _GATED, _LINEAR),
    'End': _plan(_LINEAR, _LINEAR, _GATED, _GATED),
    'forced-linear': _plan(*[_LINEAR] * NUM_LAYERS),
    'forced-nonlinear': _plan(*[(PROPAGATE, GATE_NONLINEAR)] * NUM_LAYERS),
}

# the position of a name is its checkpoint tag, never reorder
VARIANT_NAMES = ('All', 'Front', 'Middle', 'End', 'forced-linear', 'forced-nonlinear')


def layer_plan(variant_name):
    if isinstance(variant_name, VariantSpec):
        return variant_name
    for name, layers in VARIANTS.items():
        if name.lower() == str(variant_name).lower():
            return VariantSpec(name=name, layers=layers)
    raise ImproperlyConfigured(f"Unknown variant '{variant_name}', expected one of {', '.join(VARIANT_NAMES)}.")


@dataclass
class GatingMLP:
    """
    Maps the concatenation ``e^L ‖ e^N`` of a node to two branch logits. Without hidden layer it
    is a single affine map; with hidden layer the concatenation first passes an affine map of
    width D followed by leaky-ReLU.
    """
    w: np.ndarray
    b: np.ndarray
    hidden_w: np.ndarray = None
    hidden_b: np.ndarray = None

    @property
    def has_hidden(self):
        return self.hidden_w is not None

    def parameters(self):
        if self.has_hidden:
            return [self.hidden_w, self.hidden_b, self.w, self.b]
        return [self.w, self.b]

    def forward(self, x):
        if self.has_hidden:
            pre = x @ self.hidden_w + self.hidden_b
            h = activation(pre, LEAKY_RELU)
        else:
            pre, h = None, x
        return h @ self.w + self.b, (x, pre, h)

    def backward(self, cache, dlogits):
        """Return the parameter gradients in :meth:`parameters` order and the input gradient."""
        x, pre, h = cache
        dw = h.T @ dlogits
        db = dlogits.sum(axis=0)
        dh = dlogits @ self.w.T
        if not self.has_hidden:
            return [dw, db], dh
        dpre = dh * activation_grad(pre, LEAKY_RELU)
        return [x.T @ dpre, dpre.sum(axis=0), dw, db], dpre @ self.hidden_w.T


@dataclass
class ModelParams:
    embeddings: np.ndarray
    gating_mlps: list
    variant: VariantSpec

    @property
    def num_nodes(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def arrays(self):
        """All trainable arrays, embeddings first, then the gating MLPs in layer order."""
        return [self.embeddings, *(p for mlp in self.gating_mlps for p in mlp.parameters())]

    def gating_arrays(self):
        return [p for mlp in self.gating_mlps for p in mlp.parameters()]

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class ParamGrads:
    embeddings: np.ndarray
    gating_mlps: list

    def arrays(self):
        return [self.embeddings, *(g for grads in self.gating_mlps for g in grads)]


@dataclass(frozen=True)
class ScoreGrads:
    """Upstream derivative of the loss for a set of scored (user, item) pairs."""
    users: np.ndarray
    items: np.ndarray
    grads: np.ndarray

    @classmethod
    def from_triplets(cls, users, positives, negatives, d_positive, d_negative):
        return cls(
            users=np.concatenate([users, users]),
            items=np.concatenate([positives, negatives]),
            grads=np.concatenate([d_positive, d_negative]),
        )


@dataclass
class GateRecord:
    """What a learnt gate did in one layer, kept for the backward pass and for analysis."""
    sample: GateSample
    mlp_cache: tuple = field(repr=False)
    tau: float = None
    noise: np.ndarray = field(default=None, repr=False)

    @property
    def trainable(self):
        return self.tau is not None


@dataclass
class ForwardTrace:
    variant: VariantSpec
    mode: str
    tau: float
    activation: str
    num_users: int
    adjacency: object = field(repr=False)
    E_L: list = field(repr=False)
    E_N: list = field(repr=False)
    E_G: list = field(repr=False)
    gates: dict = field(repr=False)

    @property
    def beta(self):
        return 1.0 / (len(self.variant.layers) + 1)

    def scores(self, users, items):
        users = np.asarray(users)
        items = self.num_users + np.asarray(items)
        total = sum(np.einsum('nd,nd->n', E[users], E[items]) for E in self.E_G)
        return self.beta * total

    def score_matrix(self, users=None):
        if users is None:
            users = np.arange(self.num_users)
        total = sum(E[users] @ E[self.num_users:].T for E in self.E_G)
        return self.beta * total

    def final_embeddings(self, kind=EMBEDDING_FINAL):
        if kind == EMBEDDING_FINAL:
            return self.E_G[-1]
        if kind == EMBEDDING_RESIDUAL:
            return self.beta * sum(self.E_G)
        raise ImproperlyConfigured(f"Unknown embedding kind '{kind}'.")

    def decisions(self):
        return GateDecisionLog.from_trace(self)


@dataclass(frozen=True)
class GateDecisionLog:
    """
    Branch chosen per node (rows) and learnt gate (columns): 0 = linear, 1 = non-linear,
    -1 where no decision was recorded.
    """
    layers: tuple
    decisions: np.ndarray
    num_users: int = 0

    @classmethod
    def from_trace(cls, trace):
        layers = tuple(sorted(trace.gates))
        num_nodes = trace.E_G[0].shape[0]
        decisions = np.full((num_nodes, len(layers)), -1, dtype=np.int8)
        for column, layer in enumerate(layers):
            decisions[:, column] = trace.gates[layer].sample.choice
        return cls(layers=layers, decisions=decisions, num_users=trace.num_users)

    @property
    def num_nodes(self):
        return self.decisions.shape[0]


def gate_ratios(log, nodes=None, variant=None):
    """
    Percentage of linear and non-linear selections for every learnt gate. Given the ``variant``,
    the table covers all layers and reports a fixed gate as 100 % of its branch.
    """
    decisions = log.decisions if nodes is None else log.decisions[nodes]
    columns = {layer: column for column, layer in enumerate(log.layers)}
    layers = log.layers if variant is None else range(1, len(variant.layers) + 1)
    ratios = []
    for layer in layers:
        if layer in columns:
            chosen = decisions[:, columns[layer]]
            total = max(len(chosen), 1)
            linear = 100.0 * np.count_nonzero(chosen == LINEAR_BRANCH) / total
            nonlinear = 100.0 * np.count_nonzero(chosen == NONLINEAR_BRANCH) / total
        else:
            fixed = variant.layers[layer - 1].gate
            linear = 100.0 if fixed == GATE_LINEAR else 0.0
            nonlinear = 100.0 - linear
        ratios.append({'layer': layer, 'linear': linear, 'nonlinear': nonlinear})
    return ratios


def _xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (2.0 * rng.uniform((fan_in, fan_out)) - 1.0) * limit


def init_params(num_nodes, D, variant, rng, hidden_gate=False):
    """
    Draw the initial embeddings from Normal(0, 0.1²) and Xavier-uniform gating weights with
    zero biases.
    """
    if D < 1:
        raise ValueError("The embedding dimension must be positive.")
    variant = layer_plan(variant)
    embeddings = rng.normal(INIT_STD, (num_nodes, D))
    mlps = []
    for _ in variant.gated_layers:
        if hidden_gate:
            mlp = GatingMLP(
                hidden_w=_xavier_uniform(rng, 2 * D, D),
                hidden_b=np.zeros(D),
                w=_xavier_uniform(rng, D, 2),
                b=np.zeros(2),
            )
        else:
            mlp = GatingMLP(w=_xavier_uniform(rng, 2 * D, 2), b=np.zeros(2))
        mlps.append(mlp)
    return ModelParams(embeddings=embeddings, gating_mlps=mlps, variant=variant)


def propagate_linear(adj, E_G_prev):
    return spmm(adj, E_G_prev)


def propagate_nonlinear(adj, E_G_prev, E_N_prev, mode, phi=LEAKY_RELU, aggregate=None):
    """
    A bypassing layer hands the previous non-linear state on untouched, a propagating layer
    activates the neighbour aggregation. A precomputed ``aggregate`` saves the product.
    """
    if mode == BYPASS:
        return E_N_prev
    if mode != PROPAGATE:
        raise ImproperlyConfigured(f"Unknown propagation mode '{mode}'.")
    if aggregate is None:
        aggregate = spmm(adj, E_G_prev)
    return activation(aggregate, phi)


def gate_layer(E_L, E_N, mlp, tau, xi, mode, rng=None, noise=None, reference=None):
    """
    Select between the linear and the non-linear embedding of every node.

    For a learnt gate the training mode draws a straight-through Gumbel-softmax sample, the
    evaluation mode takes the noiseless argmax of the logits. With a ``reference`` sample (and its
    noise) the hard decisions are kept and the selection is re-evaluated as the straight-through
    surrogate ``hard·[e^L, e^N] + (y - y_ref)·[e^L, e^N]``, which is what finite differences see.
    """
    if E_L.shape != E_N.shape:
        raise ShapeError(f"Linear {E_L.shape} and non-linear {E_N.shape} embeddings differ in shape.")
    if xi == GATE_LINEAR:
        return E_L, None
    if xi == GATE_NONLINEAR:
        return E_N, None
    if xi != GATE_GATING:
        raise ImproperlyConfigured(f"Unknown gating type '{xi}'.")

    logits, cache = mlp.forward(np.concatenate([E_L, E_N], axis=1))
    if mode == TRAIN:
        if noise is None:
            if rng is None:
                raise ValueError("A training-mode gate needs either an Rng or replayed noise.")
            noise = gumbel_sample(rng, logits.size).reshape(logits.shape)
        sample = stgs(logits, tau, noise=noise)
        if reference is not None:
            sample = GateSample(hard=reference.hard, soft=sample.soft, logits=logits)
        record = GateRecord(sample=sample, mlp_cache=cache, tau=tau, noise=noise)
    elif mode == EVAL:
        sample = GateSample(hard=one_hot(np.argmax(logits, axis=1)), soft=softmax(logits), logits=logits)
        record = GateRecord(sample=sample, mlp_cache=cache)
    else:
        raise ImproperlyConfigured(f"Unknown mode '{mode}'.")

    E_G = np.where(sample.hard[:, LINEAR_BRANCH, None] == 1.0, E_L, E_N)
    if reference is not None:
        delta = sample.soft - reference.soft
        E_G = E_G + delta[:, LINEAR_BRANCH, None] * E_L + delta[:, NONLINEAR_BRANCH, None] * E_N
    return E_G, record


def forward(adj, params, variant=None, tau=1.0, mode=TRAIN, rng=None, phi=LEAKY_RELU, replay=None):
    """
    Propagate the initial embeddings through all layers of the variant's plan.

    Returns a scoring function ``scores_fn(users, items)`` and the :class:`ForwardTrace` holding
    every intermediate. A ``replay`` trace supplies the Gumbel noise and gate samples of an
    earlier pass, so that its hard decisions are re-evaluated through the straight-through surrogate.
    """
    variant = layer_plan(variant or params.variant)
    if len(variant.gated_layers) != len(params.gating_mlps):
        raise ConsistencyError(f"Variant '{variant}' has {len(variant.gated_layers)} learnt gates, "
                               f"but the parameters hold {len(params.gating_mlps)} gating MLPs.")
    if adj.n != params.num_nodes:
        raise ShapeError(f"Adjacency over {adj.n} nodes does not fit {params.num_nodes} embeddings.")
    mlps = dict(zip(variant.gated_layers, params.gating_mlps))

    e0 = params.embeddings
    E_L, E_N, E_G = [None], [e0], [e0]
    gates = {}
    for layer, plan in enumerate(variant.layers, start=1):
        aggregate = propagate_linear(adj, E_G[-1])
        E_L.append(aggregate)
        E_N.append(propagate_nonlinear(adj, E_G[-1], E_N[-1], plan.mode, phi, aggregate=aggregate))
        noise = reference = None
        if replay is not None and layer in replay.gates:
            noise = replay.gates[layer].noise
            reference = replay.gates[layer].sample
        selected, record = gate_layer(E_L[-1], E_N[-1], mlps.get(layer), tau, plan.gate, mode, rng,
                                      noise=noise, reference=reference)
        E_G.append(selected)
        if record is not None:
            gates[layer] = record

    trace = ForwardTrace(
        variant=variant,
        mode=mode,
        tau=tau,
        activation=phi,
        num_users=adj.num_users,
        adjacency=adj,
        E_L=E_L,
        E_N=E_N,
        E_G=E_G,
        gates=gates,
    )
    return trace.scores, trace


def backward(trace, adj, params, loss_grads):
    """
    Reverse-mode derivative of a loss over scored pairs with respect to the initial embeddings
    and the gating MLPs.

    The adjacency is symmetric, so the product's transpose is the product itself. A learnt gate
    passes the embedding gradient to the selected branch only and the logits gradient through
    the relaxed vector, ``dl = (diag(y) - y yᵀ)/τ · [⟨g, e^L⟩, ⟨g, e^N⟩]``. Gates recorded in
    evaluation mode have no noise and no temperature; their logits receive no gradient.
    """
    if trace.E_G[0].shape != params.embeddings.shape:
        raise ConsistencyError(f"Trace over embeddings of shape {trace.E_G[0].shape} does not belong "
                               f"to parameters of shape {params.embeddings.shape}.")
    if len(trace.gates) != len(params.gating_mlps) or trace.variant != params.variant:
        raise ConsistencyError(f"Trace of variant '{trace.variant}' does not belong to parameters of "
                               f"variant '{params.variant}'.")
    if adj.n != params.num_nodes:
        raise ShapeError(f"Adjacency over {adj.n} nodes does not fit {params.num_nodes} embeddings.")

    n, D = params.embeddings.shape
    item_nodes = trace.num_users + np.asarray(loss_grads.items)
    weights = trace.beta * np.asarray(loss_grads.grads, dtype=np.float64)
    pairs = sp.coo_matrix((weights, (np.asarray(loss_grads.users), item_nodes)), shape=(n, n)).tocsr()
    pairs = (pairs + pairs.T).tocsr()
    mlps = dict(zip(trace.variant.gated_layers, params.gating_mlps))
    mlp_grads = {}

    from_above = np.zeros((n, D))
    carried_N = np.zeros((n, D))
    for layer in range(len(trace.variant.layers), 0, -1):
        plan = trace.variant.layers[layer - 1]
        dG = np.asarray(pairs @ trace.E_G[layer]) + from_above
        dL = np.zeros((n, D))
        dN = carried_N
        if plan.gate == GATE_LINEAR:
            dL = dL + dG
        elif plan.gate == GATE_NONLINEAR:
            dN = dN + dG
        else:
            record = trace.gates[layer]
            hard = record.sample.hard
            dL = dL + hard[:, LINEAR_BRANCH, None] * dG
            dN = dN + hard[:, NONLINEAR_BRANCH, None] * dG
            mlp = mlps[layer]
            if record.trainable:
                dy = np.stack([
                    np.einsum('nd,nd->n', dG, trace.E_L[layer]),
                    np.einsum('nd,nd->n', dG, trace.E_N[layer]),
                ], axis=1)
                dlogits = softmax_backward(record.sample.soft, dy, record.tau)
                grads, dconcat = mlp.backward(record.mlp_cache, dlogits)
                dL = dL + dconcat[:, :D]
                dN = dN + dconcat[:, D:]
            else:
                grads = [np.zeros_like(p) for p in mlp.parameters()]
            mlp_grads[layer] = grads

        if plan.mode == PROPAGATE:
            daggregate = dL + dN * activation_grad(trace.E_L[layer], trace.activation)
            carried_N = np.zeros((n, D))
        else:
            daggregate = dL
            carried_N = dN
        from_above = spmm(adj, daggregate)

    d_embeddings = np.asarray(pairs @ trace.E_G[0]) + from_above + carried_N
    return ParamGrads(
        embeddings=d_embeddings,
        gating_mlps=[mlp_grads[layer] for layer in trace.variant.gated_layers],
    )
