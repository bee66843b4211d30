"""Fuzzy token alignment.

Shared learnable queries attend over each modality's tokens (a cross-attention
layer followed by pre-norm self-attention/FFN blocks). Every resulting query
token gets a Gaussian membership degree from its cosine to the modality's
class token, with a per-sample scale predicted by a small MLP. The two
modalities' memberships are fused with the product t-norm and used to weight
token cosines into a sample-level similarity, which feeds the SDM loss.

Functions accept numpy arrays or :class:`~fuzzyalign.autodiff.Tensor`; they
return tensors when any input is a tensor, numpy otherwise.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .numeric import normalize
from .sdm import DEFAULT_EPS, DEFAULT_TAU, sdm_rows

LN_EPS = 1e-5
MU_FLOOR = float(np.finfo(np.float64).tiny)


def _numpy_passthrough(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        tensor_in = any(isinstance(a, ad.Tensor) for a in args) or any(
            isinstance(v, ad.Tensor)
            or (isinstance(v, dict) and any(isinstance(x, ad.Tensor) for x in v.values()))
            for v in kwargs.values()
        ) or any(
            isinstance(a, dict) and any(isinstance(x, ad.Tensor) for x in a.values()) for a in args
        )
        out = fn(*args, **kwargs)
        if tensor_in:
            return out
        if isinstance(out, ad.Tensor):
            return float(out.value) if out.ndim == 0 else out.value
        return out

    return wrapper


# parameters ---------------------------------------------------------------

def init_query(num_queries, dim, rng, scale=0.02):
    return rng.normal(0.0, scale, size=(num_queries, dim))


def _attn_params(prefix, dim, rng):
    s = 1.0 / np.sqrt(dim)
    return {f"{prefix}.{n}": rng.normal(0.0, s, size=(dim, dim)) for n in ("wq", "wk", "wv", "wo")}


def init_crossformer(dim, rng, depth=2, ffn_mult=4):
    """Random projections; residual-branch outputs start at zero so each block begins as identity."""
    params = _attn_params("xattn", dim, rng)
    hidden = ffn_mult * dim
    for s in range(depth):
        p = f"blocks.{s}"
        params.update(_attn_params(f"{p}.attn", dim, rng))
        params[f"{p}.attn.wo"] = np.zeros((dim, dim))
        params[f"{p}.ln1.g"] = np.ones(dim)
        params[f"{p}.ln1.b"] = np.zeros(dim)
        params[f"{p}.ln2.g"] = np.ones(dim)
        params[f"{p}.ln2.b"] = np.zeros(dim)
        params[f"{p}.ffn.w1"] = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden))
        params[f"{p}.ffn.b1"] = np.zeros(hidden)
        params[f"{p}.ffn.w2"] = np.zeros((hidden, dim))
        params[f"{p}.ffn.b2"] = np.zeros(dim)
    return params


def init_sigma_mlp(dim, rng, hidden=None, prefix="sigma"):
    hidden = hidden or max(1, dim // 2)
    return {
        f"{prefix}.w1": rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden)),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.w2": rng.normal(0.0, 0.01, size=(hidden, 1)),
        f"{prefix}.b2": np.zeros(1),
    }


def init_fta_params(dim, num_queries, rng, depth=2, ffn_mult=4, sigma_hidden=None):
    params = {"query": init_query(num_queries, dim, rng)}
    params.update(init_crossformer(dim, rng, depth, ffn_mult))
    params.update(init_sigma_mlp(dim, rng, sigma_hidden, "sigma_a"))
    params.update(init_sigma_mlp(dim, rng, sigma_hidden, "sigma_t"))
    return params


def crossformer_depth(params):
    return len({k.split(".")[1] for k in params if k.startswith("blocks.")})


# crossformer --------------------------------------------------------------

def attention(queries, keys, values):
    """Single-head scaled dot-product attention; queries (.., K, D), keys/values (.., N, D)."""
    d = queries.shape[-1]
    scores = (queries @ ad.swap_last(keys)) * (1.0 / np.sqrt(d))
    return ad.softmax(scores, axis=-1) @ values


def layer_norm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    return centred / ad.sqrt(var + LN_EPS) * gain + bias


def cross_attention(query, context, params, prefix="xattn"):
    """Readout of ``query`` (K x D) over ``context`` (B x N x D) -> B x K x D."""
    q = query @ params[f"{prefix}.wq"]
    k = context @ params[f"{prefix}.wk"]
    v = context @ params[f"{prefix}.wv"]
    return attention(q, k, v) @ params[f"{prefix}.wo"]


def _self_block(x, params, p):
    h = layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
    a = f"{p}.attn"
    x = x + attention(h @ params[f"{a}.wq"], h @ params[f"{a}.wk"], h @ params[f"{a}.wv"]) @ params[f"{a}.wo"]
    h = layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    h = ad.gelu(h @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"])
    return x + h @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]


@_numpy_passthrough
def crossformer(query, context, params):
    """Modality-aware query tokens, B x K x D."""
    query = ad.as_tensor(query)
    context = ad.as_tensor(context)
    if context.ndim != 3 or context.shape[1] < 1:
        raise ShapeMismatch(f"context must be B x N x D with N >= 1, got {context.shape}")
    if query.shape[-1] != context.shape[-1]:
        raise ShapeMismatch(f"query dim {query.shape[-1]} != context dim {context.shape[-1]}")
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    x = cross_attention(query, context, params)
    for s in range(crossformer_depth(params)):
        x = _self_block(x, params, f"blocks.{s}")
    return x


# membership ---------------------------------------------------------------

@_numpy_passthrough
def predict_sigma(class_token, mlp, prefix="sigma"):
    """exp(MLP(class token)) with MLP = linear -> GELU -> linear(1); works on (D,) or (B, D)."""
    x = ad.as_tensor(class_token)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    h = ad.gelu(x @ mlp[f"{prefix}.w1"] + mlp[f"{prefix}.b1"])
    log_sigma = (h @ mlp[f"{prefix}.w2"] + mlp[f"{prefix}.b2"]).reshape(-1)
    sigma = ad.exp(log_sigma)
    return sigma.reshape(()) if squeeze else sigma


def gaussian_membership(r, sigma):
    """exp(-(1 - r)^2 / (2 sigma^2)) with r clamped to [-1, 1], floored at ``MU_FLOOR``."""
    gap = 1.0 - ad.clip(r, -1.0, 1.0)
    # floor at the smallest normal float so a tiny sigma never underflows a membership to exactly 0
    return ad.clip(ad.exp(-(gap * gap) / (sigma * sigma * 2.0)), MU_FLOOR, 1.0)


@_numpy_passthrough
def membership(query_tokens, class_token, sigma):
    """Membership of each query token w.r.t. the class token.

    Shapes: (D,), (D,), () -> (); or (B, K, D), (B, D), (B,) -> (B, K).
    """
    q = ad.as_tensor(query_tokens)
    c = ad.as_tensor(class_token)
    s = ad.as_tensor(sigma)
    if q.ndim == 1:
        r = (normalize(q) * normalize(c)).sum()
        return gaussian_membership(r, s)
    qn = normalize(q)
    cn = normalize(c).reshape(c.shape[0], 1, c.shape[1])
    r = (qn * cn).sum(axis=-1)
    return gaussian_membership(r, s.reshape(-1, 1))


@_numpy_passthrough
def fuzzy_and(mu_a, mu_t):
    return ad.as_tensor(mu_a) * ad.as_tensor(mu_t)


@_numpy_passthrough
def weighted_similarity(qa, qt, mu_joint):
    """(1/K) sum_j mu_joint[j] * cos(qa[j], qt[j]) for K x D token sets."""
    qa, qt, mu = ad.as_tensor(qa), ad.as_tensor(qt), ad.as_tensor(mu_joint)
    if qa.shape != qt.shape or qa.ndim != 2 or mu.shape != (qa.shape[0],):
        raise ShapeMismatch(f"qa {qa.shape}, qt {qt.shape}, mu {mu.shape}")
    cos = (normalize(qa) * normalize(qt)).sum(axis=-1)
    return (mu * cos).sum() * (1.0 / qa.shape[0])


@_numpy_passthrough
def weighted_similarity_matrix(qa, qt, mu_a, mu_t):
    """B x B matrix: entry (i, j) pairs aerial sample i with text sample j.

    Uses mu_joint = mu_a[i] * mu_t[j] per token, so the text -> aerial matrix is
    exactly the transpose.
    """
    qa, qt = ad.as_tensor(qa), ad.as_tensor(qt)
    if qa.shape[1:] != qt.shape[1:]:
        raise ShapeMismatch(f"qa {qa.shape} vs qt {qt.shape}")
    k = qa.shape[1]
    na = ad.transpose(normalize(qa), (1, 0, 2))  # K x B x D
    nt = ad.transpose(normalize(qt), (1, 2, 0))  # K x D B
    cos = na @ nt  # K x Ba x Bt
    ma = ad.swap_last(ad.as_tensor(mu_a)).reshape(k, -1, 1)
    mt = ad.swap_last(ad.as_tensor(mu_t)).reshape(k, 1, -1)
    return (cos * ma * mt).sum(axis=0) * (1.0 / k)


@dataclass
class MembershipVector:
    mu_a: np.ndarray
    mu_t: np.ndarray
    mu_joint: np.ndarray
    sigma_a: float
    sigma_t: float


@dataclass
class TokenState:
    """Per-modality forward products of the FTA branch (tensors)."""

    qa: ad.Tensor
    qt: ad.Tensor
    sigma_a: ad.Tensor
    sigma_t: ad.Tensor
    mu_a: ad.Tensor
    mu_t: ad.Tensor


def _split_cls(tokens):
    if tokens.ndim != 3 or tokens.shape[1] < 2:
        raise ShapeMismatch(f"need B x N x D tokens with N >= 2 (class + content), got {tokens.shape}")
    return tokens[:, 0, :], tokens[:, 1:, :]


def fta_forward(text_tokens, aerial_tokens, params, text_cls=None, aerial_cls=None, weighted=True):
    """Run both modalities through the shared queries.

    When class tokens are not given, token 0 of each sequence is the class
    token and the queries attend over the remaining tokens.
    """
    text_tokens, aerial_tokens = ad.as_tensor(text_tokens), ad.as_tensor(aerial_tokens)
    params = {k: ad.as_tensor(v) for k, v in params.items()}
    if text_cls is None:
        text_cls, text_tokens = _split_cls(text_tokens)
    if aerial_cls is None:
        aerial_cls, aerial_tokens = _split_cls(aerial_tokens)
    text_cls, aerial_cls = ad.as_tensor(text_cls), ad.as_tensor(aerial_cls)
    q = params["query"]
    qa = crossformer(q, aerial_tokens, params)
    qt = crossformer(q, text_tokens, params)
    sigma_a = predict_sigma(aerial_cls, params, prefix="sigma_a")
    sigma_t = predict_sigma(text_cls, params, prefix="sigma_t")
    if weighted:
        mu_a = membership(qa, aerial_cls, sigma_a)
        mu_t = membership(qt, text_cls, sigma_t)
    else:
        ones = ad.Tensor(np.ones(qa.shape[:2]))
        mu_a, mu_t = ones, ones
    return TokenState(qa, qt, sigma_a, sigma_t, mu_a, mu_t)


def fta_objective(text_tokens, aerial_tokens, identities, params, tau=DEFAULT_TAU, eps=DEFAULT_EPS,
                  text_cls=None, aerial_cls=None, weighted=True):
    """Differentiable FTA loss; returns ``(loss, TokenState)``."""
    state = fta_forward(text_tokens, aerial_tokens, params, text_cls, aerial_cls, weighted)
    sim = weighted_similarity_matrix(state.qa, state.qt, state.mu_a, state.mu_t)
    return sdm_rows(sim, identities, tau, eps).sum(), state


def fta_loss(text_tokens, aerial_tokens, identities, params, tau=DEFAULT_TAU, eps=DEFAULT_EPS,
             with_grads=True, weighted=True):
    """FTA loss value and, optionally, gradients w.r.t. every parameter and both token sets.

    Returns ``(loss, grads)`` with ``grads`` keyed by parameter name plus
    ``"text_tokens"`` and ``"aerial_tokens"``.
    """
    names = list(params)
    arrays = [np.asarray(text_tokens, dtype=np.float64), np.asarray(aerial_tokens, dtype=np.float64)]
    arrays += [np.asarray(params[n], dtype=np.float64) for n in names]

    def f(t, a, *ps):
        loss, _ = fta_objective(t, a, identities, dict(zip(names, ps)), tau, eps, weighted=weighted)
        return loss

    if not with_grads:
        return f(*(ad.Tensor(x) for x in arrays)).item(), {}
    value, grads = ad.grad(f, arrays)
    out = {"text_tokens": grads[0], "aerial_tokens": grads[1]}
    out.update(zip(names, grads[2:]))
    return value, out


def membership_vectors(state: TokenState, i_aerial, j_text=None):
    """Memberships of aerial sample i and text sample j (defaults to i) as plain arrays."""
    j_text = i_aerial if j_text is None else j_text
    mu_a = state.mu_a.value[i_aerial]
    mu_t = state.mu_t.value[j_text]
    return MembershipVector(
        mu_a=mu_a,
        mu_t=mu_t,
        mu_joint=mu_a * mu_t,
        sigma_a=float(state.sigma_a.value[i_aerial]),
        sigma_t=float(state.sigma_t.value[j_text]),
    )
