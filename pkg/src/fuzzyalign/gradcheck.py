"""Central-difference verification of tape gradients."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import NonDeterministic


def numerical_grad(f, params, step=1e-4):
    """Central differences of scalar ``f(*params)`` w.r.t. every entry of every param."""
    params = [np.array(p, dtype=np.float64) for p in params]
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*params)
            flat[i] = orig - step
            fm = f(*params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * step)
        out.append(g)
    return out


def mixed_error(analytic, numeric):
    """Worst of max(|g - n| / (|n| + 1), |g - n|) over all entries."""
    worst = 0.0
    for g, n in zip(analytic, numeric):
        if g.size == 0:
            continue
        diff = np.abs(g - n)
        worst = max(worst, float(np.max(np.maximum(diff / (np.abs(n) + 1.0), diff))))
    return worst


def grad_check(loss_fn, params, step=1e-4):
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` takes one Tensor per entry of ``params`` and returns a scalar
    Tensor. Returns the worst mixed abs/rel error.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    def f(*vals):
        return loss_fn(*(ad.Tensor(v) for v in vals)).item()

    first, second = f(*params), f(*params)
    if first != second:
        raise NonDeterministic(f"forward passes disagree: {first!r} != {second!r}")
    _, analytic = ad.grad(loss_fn, params)
    numeric = numerical_grad(f, params, step)
    return mixed_error(analytic, numeric)


# suite ------------------------------------------------------------------

SUITE_TAU = 0.1  # sharper temperatures inflate the O(h^2) truncation term of central differences


def _random_ids(rng, b):
    ids = rng.integers(0, max(1, b // 2) + 1, size=b)
    ids[1] = ids[0]  # at least one shared identity
    return ids


def suite(batch_sizes=(2, 4), dims=(4, 8), num_queries=2, seed=0, step=1e-4, tau=SUITE_TAU):
    """Grad-check sdm, the gated loss and the token loss on every (B, D); returns a list of rows."""
    from .cda import cda_objective, similarity_gap
    from .fuzzy import fta_objective, init_fta_params
    from .numeric import sigmoid
    from .sdm import sdm_loss

    rng = np.random.default_rng(seed)
    rows = []
    for b in batch_sizes:
        for d in dims:
            ids = _random_ids(rng, b)
            t, a, g = (rng.normal(size=(b, d)) for _ in range(3))
            err = grad_check(lambda x, y: sdm_loss(x, y, ids, tau), [t, a], step)
            rows.append({"loss": "sdm", "B": b, "D": d, "error": err})

            # gate and stop-gradient anchor frozen at the base point
            alpha = sigmoid(similarity_gap(t, a, g), 1.0)
            err = grad_check(
                lambda x, y, z: cda_objective(x, y, z, ids, 1.0, tau, alpha=alpha, ground_anchor=g)[0],
                [t, a, g], step,
            )
            rows.append({"loss": "cda", "B": b, "D": d, "error": err})

            params = init_fta_params(d, num_queries, rng)
            names = list(params)
            tt, ta = rng.normal(size=(b, 3, d)), rng.normal(size=(b, 3, d))

            def fta(x, y, *ps):
                return fta_objective(x, y, ids, dict(zip(names, ps)), tau)[0]

            # perturb every parameter away from the zero-initialised residual outputs
            values = [p + rng.normal(scale=0.1, size=p.shape) for p in params.values()]
            err = grad_check(fta, [tt, ta, *values], step)
            rows.append({"loss": "fta", "B": b, "D": d, "error": err})
    return rows
