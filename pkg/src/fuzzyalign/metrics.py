"""Rank-k, mAP and RSum for cosine-ranked retrieval."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from ._kernels import cosine_matrix, rank_desc, score_ranked
from .errors import OrphanQuery, ShapeMismatch
from .numeric import as_matrix, check_norms

DEFAULT_KS = (1, 5, 10)


@dataclass(frozen=True)
class RetrievalTask:
    query_features: np.ndarray
    gallery_features: np.ndarray
    query_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        q = as_matrix(self.query_features, name="query_features")
        g = as_matrix(self.gallery_features, name="gallery_features")
        qids = np.asarray(self.query_ids, dtype=np.int64)
        gids = np.asarray(self.gallery_ids, dtype=np.int64)
        if qids.shape != (q.shape[0],) or gids.shape != (g.shape[0],):
            raise ShapeMismatch("id vectors must match feature row counts")
        if q.shape[1] != g.shape[1]:
            raise ShapeMismatch(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
        missing = np.setdiff1d(qids, gids)
        if missing.size:
            raise OrphanQuery(f"query identities absent from gallery: {missing[:5].tolist()}")
        for name, v in (("query_features", q), ("gallery_features", g),
                        ("query_ids", qids), ("gallery_ids", gids)):
            object.__setattr__(self, name, v)

    def similarity(self):
        check_norms(self.query_features, "query_features")
        check_norms(self.gallery_features, "gallery_features")
        return cosine_matrix(self.query_features, self.gallery_features)


@dataclass
class MetricReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    rsum: float
    num_queries: int = 0
    ranks: dict | None = None
    cmc: list | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_table(self):
        cols = ("Rank-1", "Rank-5", "Rank-10", "mAP", "RSum")
        vals = (self.rank1, self.rank5, self.rank10, self.map, self.rsum)
        head = " ".join(f"{c:>8}" for c in cols)
        row = " ".join(f"{v:8.2f}" for v in vals)
        return f"{head}\n{row}\n"


def _threads():
    try:
        n = int(os.environ.get("FUZZYALIGN_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def _score_block(sim, qids, gids):
    order = rank_desc(sim)
    return order, *score_ranked(order, qids, gids)


def _score_all(sim, qids, gids, threads=None):
    threads = threads or _threads()
    if threads == 1 or sim.shape[0] < 2 * threads:
        return _score_block(sim, qids, gids)
    blocks = np.array_split(np.arange(sim.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda b: _score_block(sim[b], qids[b], gids), blocks))
    return tuple(np.concatenate(p) for p in zip(*parts))


def rank_all(task: RetrievalTask):
    """Full gallery ranking per query: descending cosine, ties by ascending gallery index."""
    return rank_desc(task.similarity())


def evaluate_similarity(sim, query_ids, gallery_ids, ks=DEFAULT_KS, threads=None):
    """Metrics from a precomputed Q x G score matrix (higher is better)."""
    sim = np.asarray(sim, dtype=np.float64)
    qids = np.asarray(query_ids, dtype=np.int64)
    gids = np.asarray(gallery_ids, dtype=np.int64)
    missing = np.setdiff1d(qids, gids)
    if missing.size:
        raise OrphanQuery(f"query identities absent from gallery: {missing[:5].tolist()}")
    _, first_hit, ap = _score_all(sim, qids, gids, threads)
    hit_at = np.bincount(first_hit[first_hit >= 0], minlength=sim.shape[1])
    cmc = np.cumsum(hit_at) / max(qids.size, 1) * 100.0

    def rank_k(k):
        return float(np.mean((first_hit >= 0) & (first_hit < k)) * 100.0) if qids.size else 0.0

    rank = {k: rank_k(k) for k in (*ks, 1, 5, 10)}
    r1, r5, r10 = rank[1], rank[5], rank[10]
    return MetricReport(
        rank1=r1,
        rank5=r5,
        rank10=r10,
        map=float(np.cumsum(ap)[-1] / qids.size * 100.0) if qids.size else 0.0,
        rsum=r1 + r5 + r10,
        num_queries=int(qids.size),
        ranks={str(k): rank[k] for k in ks},
        cmc=cmc.tolist(),
    )


def evaluate(task: RetrievalTask, ks=DEFAULT_KS, threads=None):
    return evaluate_similarity(task.similarity(), task.query_ids, task.gallery_ids, ks, threads)
