"""Training and evaluation of loss compositions on a synthetic world.

The "encoders" are identity maps followed by one learned linear projection
per modality. Variants:

``baseline_sdm``
    SDM(text, aerial) on global features.
``cda``
    the gated direct/bridge loss (falls back to SDM when the world has no ground).
``cda_fta``
    ``cda`` plus the fuzzy token alignment loss.
``fta_unweighted``
    ``cda`` plus token alignment with every membership pinned to 1.

Retrieval is text -> aerial on held-out identities. Variants with a token
branch add ``eval_token_weight`` times the weighted token similarity to the
global cosine.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cda import cda_objective, similarity_gap
from .config import VARIANTS, AlignmentConfig, TrainingConfig
from .errors import ConfigInvalid, CorruptFile, Diverged
from .fuzzy import fta_forward, fta_objective, init_fta_params, weighted_similarity_matrix
from .metrics import MetricReport, evaluate_similarity
from .numeric import sigmoid
from .sdm import sdm_loss
from ._kernels import cosine_matrix
from .synthetic import SyntheticWorld

log = logging.getLogger(__name__)

MODALITIES = ("text", "aerial", "ground")


def uses_tokens(variant):
    return variant in ("cda_fta", "fta_unweighted")


def init_params(world: SyntheticWorld, align: AlignmentConfig, variant, rng):
    d_in, d = world.dim, align.dim
    params = {}
    for m in MODALITIES:
        if d_in == d:
            params[f"proj.{m}"] = np.eye(d)
        else:
            params[f"proj.{m}"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d))
    if uses_tokens(variant):
        params.update(init_fta_params(d, align.num_queries, rng, align.crossformer_depth,
                                      align.ffn_mult, align.sigma_hidden or None))
    return params


@dataclass
class Batch:
    ids: np.ndarray
    text: np.ndarray
    aerial: np.ndarray
    ground: np.ndarray | None
    text_tokens: np.ndarray
    aerial_tokens: np.ndarray


def _index_by_id(ids):
    out = {}
    for row, i in enumerate(ids):
        out.setdefault(int(i), []).append(row)
    return {k: np.asarray(v) for k, v in out.items()}


class BatchSampler:
    """Distinct identities per batch; one random instance per modality for each."""

    def __init__(self, world: SyntheticWorld, identities, batch_size, rng):
        self.world = world
        self.identities = np.asarray(identities)
        if self.identities.size < 2:
            raise ConfigInvalid("training.batch_size", "need at least 2 training identities")
        self.batch_size = min(batch_size, self.identities.size)
        self.rng = rng
        self.rows = {m: _index_by_id(getattr(world, m).ids) for m in MODALITIES
                     if getattr(world, m) is not None}

    def _pick(self, modality, ids):
        rows = self.rows[modality]
        return np.array([rows[i][self.rng.integers(len(rows[i]))] for i in ids])

    def sample(self):
        w = self.world
        ids = self.rng.choice(self.identities, self.batch_size, replace=False)
        t = self._pick("text", ids)
        a = self._pick("aerial", ids)
        g = self._pick("ground", ids) if w.ground is not None else None
        return Batch(
            ids=ids,
            text=w.text.features[t],
            aerial=w.aerial.features[a],
            ground=None if g is None else w.ground.features[g],
            text_tokens=w.text.tokens[t],
            aerial_tokens=w.aerial.tokens[a],
        )


def compose_loss(params, batch: Batch, variant, align: AlignmentConfig, ground_warned=None):
    """Scalar training loss for ``variant`` plus a dict of logged components."""
    wt, wa = params["proj.text"], params["proj.aerial"]
    text = batch.text @ wt
    aerial = batch.aerial @ wa
    parts = {}
    if variant == "baseline_sdm":
        loss = sdm_loss(text, aerial, batch.ids, align.tau, align.eps)
    else:
        ground = None if batch.ground is None else batch.ground @ params["proj.ground"]
        if ground is None and ground_warned is not None and not ground_warned:
            log.warning("world has no ground modality: gated loss degenerates to plain SDM")
            ground_warned.append(True)
        loss, info = cda_objective(text, aerial, ground, batch.ids, align.k, align.tau, align.eps)
        parts["cda"] = loss.item()
        if info["alpha"] is not None:
            parts["alpha_mean"] = float(np.mean(info["alpha"]))
    if uses_tokens(variant):
        fta, _ = fta_objective(
            batch.text_tokens @ wt, batch.aerial_tokens @ wa, batch.ids, params,
            align.tau, align.eps, weighted=(variant == "cda_fta"),
        )
        parts["fta"] = fta.item()
        loss = loss + fta * align.fta_weight
    return loss, parts


def _clip(grads, max_norm):
    if max_norm <= 0:
        return grads, None
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


@dataclass
class ExperimentResult:
    variant: str
    report: MetricReport
    trace: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def trace_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.trace)


def train(world: SyntheticWorld, variant, align: AlignmentConfig, training: TrainingConfig, params=None):
    """SGD on the selected loss; returns ``(params, trace)``. Raises Diverged on a non-finite loss."""
    if variant not in VARIANTS:
        raise ConfigInvalid("training.variant", f"must be one of {', '.join(VARIANTS)}")
    rng = np.random.default_rng([training.seed, align.seed])
    if params is None:
        params = init_params(world, align, variant, rng)
    sampler = BatchSampler(world, world.train_ids, training.batch_size, rng)
    trace = []
    warned = []
    last_finite = -1
    for step in range(training.steps):
        batch = sampler.sample()
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        loss, parts = compose_loss(leaves, batch, variant, align, warned)
        value = loss.item()
        if not math.isfinite(value):
            raise Diverged(step, last_finite)
        ad.backward(loss)
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in leaves.items()}
        grads, gnorm = _clip(grads, training.clip_norm)
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise Diverged(step, last_finite)
        params = {k: params[k] - training.lr * grads[k] for k in params}
        last_finite = step
        row = {"step": step, "loss": value}
        row.update(parts)
        if gnorm is not None:
            row["grad_norm"] = gnorm
        trace.append(row)
    return params, trace


def _rows_of(modality, ids):
    keep = np.isin(modality.ids, ids)
    return np.flatnonzero(keep)


def token_state(params, world: SyntheticWorld, text_rows, aerial_rows, weighted=True):
    wt, wa = params["proj.text"], params["proj.aerial"]
    return fta_forward(world.text.tokens[text_rows] @ wt, world.aerial.tokens[aerial_rows] @ wa,
                       params, weighted=weighted)


def retrieval_scores(params, world: SyntheticWorld, variant, align: AlignmentConfig, ids=None):
    """Text x aerial score matrix on identities ``ids`` (default: held-out split)."""
    ids = world.test_ids if ids is None else ids
    t_rows = _rows_of(world.text, ids)
    a_rows = _rows_of(world.aerial, ids)
    t = world.text.features[t_rows] @ params["proj.text"]
    a = world.aerial.features[a_rows] @ params["proj.aerial"]
    scores = cosine_matrix(t, a)
    if uses_tokens(variant) and align.eval_token_weight > 0:
        st = token_state(params, world, t_rows, a_rows, weighted=(variant == "cda_fta"))
        token_sim = weighted_similarity_matrix(st.qa.value, st.qt.value, st.mu_a.value, st.mu_t.value)
        scores = scores + align.eval_token_weight * token_sim.T
    return scores, world.text.ids[t_rows], world.aerial.ids[a_rows]


def evaluate_model(params, world, variant, align, ids=None):
    scores, qids, gids = retrieval_scores(params, world, variant, align, ids)
    return evaluate_similarity(scores, qids, gids)


def run_experiment(world: SyntheticWorld, variant, align: AlignmentConfig, training: TrainingConfig):
    params, trace = train(world, variant, align, training)
    report = evaluate_model(params, world, variant, align)
    return ExperimentResult(variant=variant, report=report, trace=trace, params=params)


# analysis ---------------------------------------------------------------

def gate_analysis(params, world: SyntheticWorld, align: AlignmentConfig, ids=None):
    """Per-aerial-sample (delta, alpha), pairing each with its identity's first text and ground."""
    if world.ground is None:
        return None
    ids = world.train_ids if ids is None else ids
    a_rows = _rows_of(world.aerial, ids)
    a_ids = world.aerial.ids[a_rows]
    t_first = _index_by_id(world.text.ids)
    g_first = _index_by_id(world.ground.ids)
    t_rows = np.array([t_first[int(i)][0] for i in a_ids])
    g_rows = np.array([g_first[int(i)][0] for i in a_ids])
    t = world.text.features[t_rows] @ params["proj.text"]
    a = world.aerial.features[a_rows] @ params["proj.aerial"]
    g = world.ground.features[g_rows] @ params["proj.ground"]
    delta = similarity_gap(t, a, g)
    return {"aerial_rows": a_rows, "ids": a_ids, "delta": delta, "alpha": sigmoid(delta, align.k)}


def membership_analysis(params, world: SyntheticWorld, ids=None):
    """Per-sample token memberships for aerial samples and their identity's first text sample."""
    if "query" not in params:
        return None
    ids = world.train_ids if ids is None else ids
    a_rows = _rows_of(world.aerial, ids)
    a_ids = world.aerial.ids[a_rows]
    t_first = _index_by_id(world.text.ids)
    t_rows = np.array([t_first[int(i)][0] for i in a_ids])
    st = token_state(params, world, t_rows, a_rows)
    mu_a, mu_t = st.mu_a.value, st.mu_t.value
    return {
        "aerial_rows": a_rows,
        "ids": a_ids,
        "mu_a": mu_a,
        "mu_t": mu_t,
        "mu_joint": mu_a * mu_t,
        "sigma_a": st.sigma_a.value,
        "sigma_t": st.sigma_t.value,
    }


# checkpoints ------------------------------------------------------------

def params_to_json(params, meta=None):
    doc = {
        "meta": meta or {},
        "params": {k: {"shape": list(v.shape), "data": np.asarray(v).reshape(-1).tolist()}
                   for k, v in sorted(params.items())},
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def params_from_json(text):
    try:
        doc = json.loads(text)
        params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptFile(f"bad checkpoint: {exc}") from None
    return params, doc.get("meta", {})
