"""Similarity distribution matching (SDM) loss.

The loss compares, for every anchor in a batch, the softmax distribution of
its similarities against the label distribution ``q`` built from identity
matches. Both retrieval directions are used: rows of ``S`` (a -> b) and rows
of ``S.T`` (b -> a), each weighted by one half.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._kernels import cosine_matrix
from .errors import NoPositive, ShapeMismatch
from .numeric import as_matrix, check_norms, pairwise_cosine_t

DEFAULT_TAU = 0.02
DEFAULT_EPS = 1e-8


@dataclass(frozen=True)
class LabeledBatch:
    features_a: np.ndarray
    features_b: np.ndarray
    identities: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.features_a, name="features_a")
        b = as_matrix(self.features_b, name="features_b")
        ids = np.asarray(self.identities)
        if a.shape != b.shape:
            raise ShapeMismatch(f"features_a {a.shape} vs features_b {b.shape}")
        if ids.shape != (a.shape[0],):
            raise ShapeMismatch(f"identities shape {ids.shape} does not match B={a.shape[0]}")
        if a.shape[0] < 2:
            raise ShapeMismatch("a loss batch needs at least 2 rows")
        object.__setattr__(self, "features_a", a)
        object.__setattr__(self, "features_b", b)
        object.__setattr__(self, "identities", ids)


def pairwise_cosine(features_a, features_b):
    a = as_matrix(features_a, name="features_a")
    b = as_matrix(features_b, name="features_b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    check_norms(a, "features_a")
    check_norms(b, "features_b")
    return cosine_matrix(a, b)


def label_distribution(ids_a, ids_b=None):
    """Row-normalised identity-match matrix q, where y[i, j] = [id_a[i] == id_b[j]]."""
    ids_a = np.asarray(ids_a)
    ids_b = ids_a if ids_b is None else np.asarray(ids_b)
    y = (ids_a[:, None] == ids_b[None, :]).astype(np.float64)
    counts = y.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        row = int(np.flatnonzero(counts[:, 0] == 0)[0])
        raise NoPositive(f"row {row} (identity {ids_a[row]!r}) has no positive in the batch")
    return y / counts


def _log_target(q, eps):
    # floor at the most negative finite float: an underflowed p then contributes 0 instead of 0 * inf
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(q + eps), -np.finfo(np.float64).max)


def sdm_rows(sim, identities, tau=DEFAULT_TAU, eps=DEFAULT_EPS):
    """Per-anchor SDM contributions of a B x B similarity tensor.

    Row ``i`` collects anchor ``i``'s KL term in both directions, so the rows
    sum to the batch loss.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    sim = ad.as_tensor(sim)
    n = sim.shape[0]
    if sim.shape != (n, n):
        raise ShapeMismatch(f"similarity matrix must be square, got {sim.shape}")
    q = label_distribution(identities)
    log_q = _log_target(q, eps)
    # identities pair row i of a with row i of b, so q is the same for b -> a
    scaled = sim * (1.0 / tau)
    rows = 0.0
    for logits in (scaled, ad.swap_last(scaled)):
        logp = ad.log_softmax(logits, axis=1)
        rows = rows + (ad.exp(logp) * (logp - log_q)).sum(axis=1)
    return rows * 0.5


def sdm_loss(features_a, features_b, identities, tau=DEFAULT_TAU, eps=DEFAULT_EPS):
    """Differentiable SDM between two feature tensors; returns a scalar Tensor."""
    sim = pairwise_cosine_t(ad.as_tensor(features_a), ad.as_tensor(features_b))
    return sdm_rows(sim, identities, tau, eps).sum()


def sdm(batch: LabeledBatch, tau=DEFAULT_TAU, eps=DEFAULT_EPS):
    """SDM value plus gradients w.r.t. both feature matrices.

    Returns ``(loss, {"features_a": grad_a, "features_b": grad_b})``.
    """
    value, (ga, gb) = ad.grad(
        lambda a, b: sdm_loss(a, b, batch.identities, tau, eps),
        [batch.features_a, batch.features_b],
    )
    return value, {"features_a": ga, "features_b": gb}
