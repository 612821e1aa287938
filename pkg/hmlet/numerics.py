"""
Numerical building blocks of the propagation engine: a seedable random stream, sparse-dense
products, the two non-linear activations with their derivatives and the straight-through
Gumbel-softmax primitive.

Dense matrices are plain ``numpy.ndarray`` objects of dtype ``float64``; sparse matrices are
held by :class:`hmlet.graph.NormalizedAdjacency` in CSR layout.
"""
import hashlib
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ImproperlyConfigured

from hmlet.exceptions import ShapeError

LEAKY_RELU = 'leaky_relu'
ELU = 'elu'
ACTIVATIONS = (LEAKY_RELU, ELU)

LEAKY_RELU_SLOPE = 0.01
ELU_ALPHA = 1.0

UNIFORM_CLAMP = 1e-12

LINEAR_BRANCH, NONLINEAR_BRANCH = 0, 1


class Rng:
    """
    Deterministic pseudo random stream seeded by a 64-bit integer.

    Consumers which must not disturb each other get their own stream through :meth:`stream`.
    A stream is derived from the master seed and a purpose label, so that adding draws for one
    purpose never shifts the numbers another purpose sees.
    """
    def __init__(self, seed, purpose=None):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.purpose = purpose
        entropy = [self.seed]
        if purpose is not None:
            digest = hashlib.sha256(purpose.encode('utf-8')).digest()
            entropy.append(int.from_bytes(digest[:8], 'little'))
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def stream(self, purpose):
        if self.purpose:
            purpose = f'{self.purpose}/{purpose}'
        return Rng(self.seed, purpose)

    def uniform(self, size):
        return self.generator.random(size)

    def normal(self, scale, size):
        return self.generator.normal(0.0, scale, size)

    def integers(self, high, size):
        return self.generator.integers(0, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f'<{self.__class__.__name__} seed={self.seed} purpose="{self.purpose}">'


@dataclass(frozen=True)
class GateSample:
    """
    Outcome of a straight-through Gumbel-softmax draw. All three arrays have the shape of the
    logits, the last axis enumerates the branches (0 = linear, 1 = non-linear).
    """
    hard: np.ndarray
    soft: np.ndarray
    logits: np.ndarray

    @property
    def choice(self):
        return np.argmax(self.hard, axis=-1)


def spmm(adj, x):
    """Multiply the sparse adjacency with a dense block of node rows."""
    matrix = getattr(adj, 'matrix', adj)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"Cannot multiply a {matrix.shape[0]}×{matrix.shape[1]} adjacency with a block of shape {x.shape}")
    return np.asarray(matrix @ x)


def _check_activation(kind):
    if kind not in ACTIVATIONS:
        raise ImproperlyConfigured(f"Unknown activation '{kind}', expected one of {', '.join(ACTIVATIONS)}.")


def activation(x, kind=LEAKY_RELU):
    _check_activation(kind)
    if kind == LEAKY_RELU:
        return np.where(x >= 0.0, x, LEAKY_RELU_SLOPE * x)
    return np.where(x > 0.0, x, ELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def activation_grad(x, kind=LEAKY_RELU):
    """
    Elementwise derivative of :func:`activation`. At zero both activations use the right
    derivative, which is 1.
    """
    _check_activation(kind)
    if kind == LEAKY_RELU:
        return np.where(x >= 0.0, 1.0, LEAKY_RELU_SLOPE)
    return np.where(x >= 0.0, 1.0, ELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def gumbel_transform(u):
    u = np.clip(u, UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def gumbel_sample(rng, n):
    if isinstance(n, int) and n < 1:
        raise ValueError("At least one Gumbel sample must be drawn.")
    return gumbel_transform(rng.uniform(n))


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(y, grad, tau=1.0):
    """Apply the transposed Jacobian ``(diag(y) - y yᵀ) / tau`` of a tempered softmax row-wise."""
    inner = np.sum(y * grad, axis=-1, keepdims=True)
    return y * (grad - inner) / tau


def one_hot(index, n=2):
    return np.eye(n)[index]


def stgs(logits, tau, rng=None, noise=None):
    """
    Straight-through Gumbel-softmax. The hard one-hot vector and the relaxed vector derive from
    the same noise draw, hence the hot position of ``hard`` is the argmax of ``soft``.
    Pre-drawn ``noise`` of the logits' shape replaces the draw from ``rng``.
    """
    if not tau > 0:
        raise ValueError(f"Temperature must be positive, got {tau}.")
    logits = np.asarray(logits, dtype=np.float64)
    if noise is None:
        noise = gumbel_sample(rng, logits.size).reshape(logits.shape)
    perturbed = logits + noise
    hard = one_hot(np.argmax(perturbed, axis=-1), logits.shape[-1])
    soft = softmax(perturbed / tau)
    return GateSample(hard=hard, soft=soft, logits=logits)
