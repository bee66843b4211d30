"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np


def cosine_matrix(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    an = a / np.sqrt(np.einsum("ij,ij->i", a, a))[:, None]
    bn = b / np.sqrt(np.einsum("ij,ij->i", b, b))[:, None]
    return np.einsum("ik,jk->ij", an, bn)


def rank_desc(sim):
    """Gallery indices per query, by descending score; ties keep index order."""
    return np.argsort(-np.asarray(sim, dtype=np.float64), axis=1, kind="stable")


def score_ranked(order, query_ids, gallery_ids):
    """First-hit position (0-based, -1 if none) and average precision per query."""
    order = np.asarray(order)
    q = order.shape[0]
    first_hit = np.full(q, -1, dtype=np.int64)
    ap = np.zeros(q, dtype=np.float64)
    for i in range(q):
        hits = gallery_ids[order[i]] == query_ids[i]
        pos = np.flatnonzero(hits)
        if pos.size == 0:
            continue
        first_hit[i] = pos[0]
        # left-to-right accumulation in rank order, matching the compiled kernel bit for bit
        ap[i] = np.cumsum(np.arange(1, pos.size + 1) / (pos + 1.0))[-1] / pos.size
    return first_hit, ap
