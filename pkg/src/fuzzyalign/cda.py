"""Context-aware dynamic alignment: per-sample gating of direct vs ground-bridged SDM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import MissingGround, ShapeMismatch
from .numeric import as_matrix, check_norms, sigmoid
from .sdm import DEFAULT_EPS, DEFAULT_TAU, LabeledBatch, sdm, sdm_loss, sdm_rows
from .numeric import pairwise_cosine_t

DEFAULT_K = 1.0


@dataclass(frozen=True)
class TriModalBatch:
    text: np.ndarray
    aerial: np.ndarray
    ground: np.ndarray | None
    identities: np.ndarray

    def __post_init__(self):
        text = as_matrix(self.text, name="text")
        aerial = as_matrix(self.aerial, name="aerial")
        if aerial.shape != text.shape:
            raise ShapeMismatch(f"aerial {aerial.shape} vs text {text.shape}")
        if self.ground is not None:
            ground = as_matrix(self.ground, name="ground")
            if ground.shape != text.shape:
                raise ShapeMismatch(f"ground {ground.shape} vs text {text.shape}")
            object.__setattr__(self, "ground", ground)
        ids = np.asarray(self.identities)
        if ids.shape != (text.shape[0],):
            raise ShapeMismatch(f"identities shape {ids.shape} does not match B={text.shape[0]}")
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "aerial", aerial)
        object.__setattr__(self, "identities", ids)

    @property
    def has_ground(self):
        return self.ground is not None


@dataclass
class GateResult:
    """Gate values and loss decomposition.

    ``loss_direct`` and ``loss_bridge`` are the unweighted batch means of the
    per-sample terms; ``loss_total`` is their per-sample alpha mixture. In the
    degenerate no-ground case ``delta``/``alpha``/``loss_bridge`` are None and
    ``loss_total`` is plain SDM(text, aerial).
    """

    delta: np.ndarray | None
    alpha: np.ndarray | None
    loss_direct: float
    loss_bridge: float | None
    loss_total: float
    direct_terms: np.ndarray | None = None
    bridge_terms: np.ndarray | None = None
    grads: dict = field(default_factory=dict)

    @property
    def degenerate(self):
        return self.alpha is None


def _paired_cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_norms(a, "text")
    check_norms(b, "aerial/ground")
    return np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def similarity_gap(text, aerial, ground):
    """Row-wise sim(T_i, A_i) - sim(T_i, G_i)."""
    return _paired_cosine(text, aerial) - _paired_cosine(text, ground)


def gate_coefficients(batch: TriModalBatch, k=DEFAULT_K):
    if not batch.has_ground:
        raise MissingGround("gating needs ground features")
    if k <= 0:
        raise ValueError("k must be positive")
    delta = similarity_gap(batch.text, batch.aerial, batch.ground)
    return delta, sigmoid(delta, k)


def cda_objective(text, aerial, ground, identities, k=DEFAULT_K, tau=DEFAULT_TAU, eps=DEFAULT_EPS,
                  alpha=None, ground_anchor=None):
    """Differentiable gated loss on tensors.

    Returns ``(loss, info)`` where ``info`` holds the numpy delta/alpha and the
    per-sample direct and bridge terms (``stopped`` is the aerial-to-ground part of the bridge). The gate is computed from values only,
    so no gradient flows through alpha; pass ``alpha`` to pin it (e.g. for
    finite-difference checks). The ground features enter the aerial bridge
    term only through ``stop_grad``; ``ground_anchor`` substitutes a separate
    frozen copy there so that term can be probed independently. With ``ground=None`` the loss is exactly
    ``sdm_loss(text, aerial)``.
    """
    text, aerial = ad.as_tensor(text), ad.as_tensor(aerial)
    if ground is None:
        loss = sdm_loss(text, aerial, identities, tau, eps)
        return loss, {"delta": None, "alpha": None, "direct": None, "bridge": None, "stopped": None}
    ground = ad.as_tensor(ground)
    if k <= 0:
        raise ValueError("k must be positive")
    b = text.shape[0]
    delta = similarity_gap(text.value, aerial.value, ground.value)
    if alpha is None:
        alpha = sigmoid(delta, k)
    else:
        alpha = np.asarray(alpha, dtype=np.float64)

    anchor = ground if ground_anchor is None else ad.as_tensor(ground_anchor)
    # per-sample term = B x (anchor row of the batch SDM), so its batch mean is the SDM value
    direct = sdm_rows(pairwise_cosine_t(text, aerial), identities, tau, eps) * float(b)
    stopped = sdm_rows(pairwise_cosine_t(ad.stop_grad(anchor), aerial), identities, tau, eps) * float(b)
    bridge = sdm_rows(pairwise_cosine_t(text, ground), identities, tau, eps) * float(b) + stopped
    loss = (direct * alpha + bridge * (1.0 - alpha)).sum() * (1.0 / b)
    info = {"delta": delta, "alpha": alpha, "direct": direct.value, "bridge": bridge.value,
            "stopped": stopped.value}
    return loss, info


def cda_loss(batch: TriModalBatch, k=DEFAULT_K, tau=DEFAULT_TAU, eps=DEFAULT_EPS, with_grads=False):
    """Evaluate the gated loss on a batch; optionally attach gradients per modality."""
    if not batch.has_ground:
        lb = LabeledBatch(batch.text, batch.aerial, batch.identities)
        if with_grads:
            value, g = sdm(lb, tau, eps)
            grads = {"text": g["features_a"], "aerial": g["features_b"]}
        else:
            value = sdm_loss(lb.features_a, lb.features_b, lb.identities, tau, eps).item()
            grads = {}
        return GateResult(None, None, value, None, value, grads=grads)

    leaves = {
        name: ad.Tensor(arr, requires_grad=with_grads)
        for name, arr in (("text", batch.text), ("aerial", batch.aerial), ("ground", batch.ground))
    }
    loss, info = cda_objective(
        leaves["text"], leaves["aerial"], leaves["ground"], batch.identities, k, tau, eps
    )
    grads = {}
    if with_grads:
        ad.backward(loss)
        grads = {n: (np.zeros_like(t.value) if t.grad is None else t.grad) for n, t in leaves.items()}
    return GateResult(
        delta=info["delta"],
        alpha=info["alpha"],
        loss_direct=float(info["direct"].mean()),
        loss_bridge=float(info["bridge"].mean()),
        loss_total=loss.item(),
        direct_terms=info["direct"],
        bridge_terms=info["bridge"],
        grads=grads,
    )


def alpha_variance_sweep(delta, ks=(1, 2, 4, 8, 12, 16)):
    """Population variance of the gate values for each steepness ``k``."""
    delta = np.asarray(delta, dtype=np.float64)
    return [(float(k), float(np.var(sigmoid(delta, k)))) for k in ks]
