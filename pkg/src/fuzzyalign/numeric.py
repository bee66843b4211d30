"""Scalar/vector numeric kernels shared by every loss."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch, ZeroNorm

NORM_FLOOR = 1e-12


def as_matrix(x, ndim=2, name="matrix"):
    """Promote to a float64 array, checking rank and finiteness."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeMismatch(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def cosine_sim(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeMismatch(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise ZeroNorm(f"vector norm below {NORM_FLOOR:g} (|a|={na:.3g}, |b|={nb:.3g})")
    return float(a @ b / (na * nb))


def sigmoid(x, k=1.0):
    """Logistic 1/(1+exp(-k*x)), branching on sign so neither side overflows."""
    if k <= 0:
        raise ValueError("k must be positive")
    z = k * np.asarray(x, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def softmax_row(logits, tau=1.0):
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def kl_weighted_sum(p, q, eps=0.0):
    """Sum of p * log(p / (q + eps)); zero-probability entries of p contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeMismatch(f"p {p.shape} vs q {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q + eps)), 0.0)
    return float(terms.sum())


def check_norms(x, name="features"):
    """Raise ZeroNorm if any row (last axis) of ``x`` is degenerate."""
    norms = np.linalg.norm(np.asarray(x.value if isinstance(x, ad.Tensor) else x), axis=-1)
    if norms.size and norms.min() < NORM_FLOOR:
        idx = np.unravel_index(int(np.argmin(norms)), norms.shape)
        raise ZeroNorm(f"{name} row {idx} has norm {norms.min():.3g}")


def normalize(x, axis=-1):
    """Differentiable L2 normalisation of tensor ``x`` along ``axis``."""
    check_norms(x)
    return x / ad.l2norm(x, axis=axis, keepdims=True)


def pairwise_cosine_t(a, b):
    """Differentiable B_a x B_b cosine matrix between rows of tensors ``a`` and ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatch(f"feature dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    return normalize(a) @ ad.swap_last(normalize(b))
