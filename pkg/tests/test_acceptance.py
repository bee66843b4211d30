"""Acceptance criteria, one test each. Run alone with ``python3 tests/test_acceptance.py``.

Each test prints a pass/fail line in the terminal summary.
"""
import time

import numpy as np
import pytest

import oracles
from fuzzyalign import autodiff as ad
from fuzzyalign import cli
from fuzzyalign.cda import TriModalBatch, alpha_variance_sweep, cda_loss, cda_objective, similarity_gap
from fuzzyalign.config import AlignmentConfig, ScenarioConfig, TrainingConfig
from fuzzyalign.fuzzy import (
    fta_loss,
    fuzzy_and,
    gaussian_membership,
    init_fta_params,
    membership,
    weighted_similarity,
)
from fuzzyalign.gradcheck import numerical_grad, suite
from fuzzyalign.io import read_embeddings, write_embeddings
from fuzzyalign.metrics import evaluate_similarity
from fuzzyalign.numeric import sigmoid
from fuzzyalign.sdm import pairwise_cosine, sdm_loss, sdm_rows
from fuzzyalign.synthetic import generate
from fuzzyalign.train import gate_analysis, run_experiment, train

SWEEP = (1, 2, 4, 8, 12, 16)


def test_c01_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rows = suite(batch_sizes=(2, 4), dims=(4, 8), num_queries=2, step=1e-4)
    elapsed = time.perf_counter() - t0
    worst = {name: max(r["error"] for r in rows if r["loss"] == name) for name in ("sdm", "cda", "fta")}
    criterion("C1 gradient fidelity",
              ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert len(rows) == 12
    assert max(worst.values()) <= 1e-4
    assert elapsed < 60


def test_c02_stop_gradient(criterion):
    rng = np.random.default_rng(0)
    worst_analytic = worst_probe = 0.0
    for _ in range(5):
        b, d = 4, 6
        t, a, g = (rng.normal(size=(b, d)) for _ in range(3))
        ids = np.array([0, 1, 0, 2])
        # analytic: gradient of SDM(sg(G), A) w.r.t. G
        g_leaf = ad.Tensor(g, requires_grad=True)
        a_leaf = ad.Tensor(a, requires_grad=True)
        ad.backward(sdm_loss(ad.stop_grad(g_leaf), a_leaf, ids))
        grad_g = np.zeros_like(g) if g_leaf.grad is None else g_leaf.grad
        worst_analytic = max(worst_analytic, float(np.max(np.abs(grad_g))))
        assert np.any(a_leaf.grad != 0)

        # probe: gate frozen, stopped copy held at the base point while G moves in the rest of the graph
        alpha = sigmoid(similarity_gap(t, a, g), 1.0)
        n = len(ids)

        def full(gv):
            return cda_objective(t, a, ad.Tensor(gv), ids, alpha=alpha, ground_anchor=gv)[0].item()

        def live_only(gv):
            rows = sdm_rows(pairwise_cosine(t, gv), ids).value
            return float(np.sum((1.0 - alpha) * rows * n) / n)

        fd_full = numerical_grad(full, [g], 1e-4)[0]
        fd_live = numerical_grad(live_only, [g], 1e-4)[0]
        # probe the stopped term itself while only the live G moves
        def stopped(gv):
            info = cda_objective(t, a, ad.Tensor(gv), ids, alpha=alpha, ground_anchor=g)[1]
            return float(np.sum((1.0 - alpha) * info["stopped"]) / n)

        fd_stopped = numerical_grad(stopped, [g], 1e-4)[0]
        worst_probe = max(worst_probe, float(np.max(np.abs(fd_stopped))))
        # and the analytic gradient of the whole loss is the live term's alone
        gl = ad.Tensor(g, requires_grad=True)
        ad.backward(cda_objective(t, a, gl, ids, alpha=alpha, ground_anchor=g)[0])
        np.testing.assert_allclose(gl.grad, fd_live, rtol=1e-5, atol=1e-6)
        assert np.max(np.abs(fd_full - fd_live)) > 1e-6  # the forward value does depend on the stopped copy
    criterion("C2 stop-gradient", f"analytic |dL/dG| {worst_analytic:.1e} (need 0), FD probe {worst_probe:.1e} (tol 1e-10)")
    assert worst_analytic == 0.0
    assert worst_probe <= 1e-10


def test_c03_gate_exactness(criterion):
    at_zero = [sigmoid(0.0, k) for k in SWEEP]
    grid = np.linspace(-2, 2, 2001)  # a difference of two cosines
    monotone = all(np.all(np.diff(sigmoid(grid, k)) > 0) for k in SWEEP)
    half = np.random.default_rng(1).uniform(0, 0.8, size=200)
    sym = [v for _, v in alpha_variance_sweep(np.concatenate([half, -half]), SWEEP)]
    w = generate(ScenarioConfig(seed=0))
    align = AlignmentConfig()
    params, _ = train(w, "cda", align, TrainingConfig(variant="cda"))
    trained = [v for _, v in alpha_variance_sweep(gate_analysis(params, w, align)["delta"], SWEEP)]
    nondecreasing = lambda v: all(b >= a for a, b in zip(v, v[1:]))
    criterion("C3 gate exactness",
              f"alpha(0)=0.5 for all k: {all(x == 0.5 for x in at_zero)}; strictly monotone: {monotone}; "
              f"variance sweep non-decreasing (symmetric gaps {nondecreasing(sym)}, trained-world gaps {nondecreasing(trained)})")
    assert all(x == 0.5 for x in at_zero)
    assert monotone
    assert nondecreasing(sym) and nondecreasing(trained)


def test_c04_degenerate_cda(criterion):
    rng = np.random.default_rng(2)
    same = 0
    for n in range(50):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        t, a = rng.normal(size=(b, d)), rng.normal(size=(b, d))
        ids = rng.integers(0, max(2, b // 2), size=b)
        ids[1] = ids[0]
        res = cda_loss(TriModalBatch(t, a, None, ids), k=float(rng.uniform(0.5, 16)))
        same += res.loss_total == sdm_loss(t, a, ids).item()
    criterion("C4 degenerate CDA", f"{same}/50 batches bit-identical to SDM")
    assert same == 50


def test_c05_fuzzy_algebra(criterion):
    rng = np.random.default_rng(3)
    mu = membership(rng.normal(size=(200, 4, 8)), rng.normal(size=(200, 8)), np.exp(rng.normal(size=200)))
    in_range = bool(np.all((mu > 0) & (mu <= 1)))
    at_one = all(gaussian_membership(1.0, s).item() == 1.0 for s in (0.01, 0.5, 1.0, 7.0))
    mu_t = rng.random(mu.shape)
    joint = fuzzy_and(mu, mu_t)
    exact = bool(np.array_equal(joint, mu * mu_t)) and bool(np.all(joint <= np.minimum(mu, mu_t)))
    invariant = True
    for _ in range(200):
        k = 6
        qa, qt = rng.normal(size=(k, 5)), rng.normal(size=(k, 5))
        m = rng.random(k)
        off = rng.random(k) < 0.5
        m[off] = 0.0
        base = weighted_similarity(qa, qt, m)
        qa[off] = rng.normal(scale=1e3, size=(off.sum(), 5))
        qt[off] = rng.normal(scale=1e3, size=(off.sum(), 5))
        invariant &= weighted_similarity(qa, qt, m) == base
    criterion("C5 fuzzy algebra",
              f"mu in (0,1]: {in_range}; mu(r=1)=1: {at_one}; joint exact and <= min: {exact}; suppression invariant: {invariant}")
    assert in_range and at_one and exact and invariant


def test_c06_loss_oracles(criterion):
    rng = np.random.default_rng(4)
    worst = {"sdm": 0.0, "cda": 0.0, "fta": 0.0}
    n = 100
    for _ in range(n):
        b, d = int(rng.integers(2, 5)), int(rng.integers(2, 9))
        ids = rng.integers(0, 2, size=b)
        ids[1] = ids[0]
        tau = float(rng.uniform(0.02, 1.0))
        t, a, g = (rng.normal(size=(b, d)) for _ in range(3))
        rel = lambda x, y: abs(x - y) / abs(y)
        worst["sdm"] = max(worst["sdm"], rel(sdm_loss(t, a, ids, tau).item(),
                                             oracles.sdm(t.tolist(), a.tolist(), ids.tolist(), tau, 1e-8)))
        k = float(rng.choice(SWEEP))
        worst["cda"] = max(worst["cda"], rel(cda_loss(TriModalBatch(t, a, g, ids), k, tau).loss_total,
                                             oracles.cda(t.tolist(), a.tolist(), g.tolist(), ids.tolist(), k, tau, 1e-8)[0]))
        params = {key: v + rng.normal(scale=0.1, size=v.shape) for key, v in init_fta_params(d, 2, rng).items()}
        tt, ta = rng.normal(size=(b, 3, d)), rng.normal(size=(b, 3, d))
        got, _ = fta_loss(tt, ta, ids, params, tau, with_grads=False)
        worst["fta"] = max(worst["fta"], rel(got, oracles.fta(tt, ta, ids.tolist(), params, tau, 1e-8)))
    criterion("C6 loss oracles", f"{n} instances each; worst relative error " +
              ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-10)")
    assert max(worst.values()) <= 1e-10


@pytest.mark.parametrize("backend", ["python", "cython"])
def test_c07_metric_oracle(criterion, backend, monkeypatch):
    import fuzzyalign.metrics as metrics
    from fuzzyalign._kernels import _pykernels

    if backend == "cython":
        try:
            from fuzzyalign._kernels import _ckernels as impl
        except ImportError:
            pytest.skip("compiled extension not built")
    else:
        impl = _pykernels
    monkeypatch.setattr(metrics, "rank_desc", impl.rank_desc)
    monkeypatch.setattr(metrics, "score_ranked", impl.score_ranked)
    rng = np.random.default_rng(5)
    exact = ordered = 0
    n = 200
    for _ in range(n):
        q = int(rng.integers(1, 21))
        g = int(rng.integers(q, 51))
        gids = rng.integers(0, 8, size=g)
        qids = rng.choice(gids, size=q)
        sim = np.round(rng.normal(size=(q, g)), 1)
        r = evaluate_similarity(sim, qids, gids)
        exact += (r.rank1, r.rank5, r.rank10, r.map) == oracles.retrieval(sim.tolist(), qids.tolist(), gids.tolist())
        ordered += r.rank1 <= r.rank5 <= r.rank10 and r.rsum == r.rank1 + r.rank5 + r.rank10
    criterion(f"C7 metric oracle ({backend} kernels)", f"{exact}/{n} exact matches; ordering and RSum identity {ordered}/{n}")
    assert exact == n and ordered == n


def test_c08_directional_ablation(criterion):
    seeds = range(10)
    scenario = ScenarioConfig()
    assert scenario.token_dropout_prob == 0.5
    assert scenario.aerial_noise_scale == 2 * scenario.ground_noise_scale
    r1 = {v: [] for v in ("baseline_sdm", "cda", "cda_fta")}
    t0 = time.perf_counter()
    for s in seeds:
        w = generate(ScenarioConfig(seed=s))
        for v in r1:
            r1[v].append(run_experiment(w, v, AlignmentConfig(seed=s), TrainingConfig(variant=v, seed=s)).report.rank1)
    elapsed = time.perf_counter() - t0
    m = {v: float(np.mean(x)) for v, x in r1.items()}
    d1 = float(np.mean(np.subtract(r1["cda"], r1["baseline_sdm"])))
    d2 = float(np.mean(np.subtract(r1["cda_fta"], r1["cda"])))
    criterion("C8 directional ablation",
              f"mean Rank-1 baseline {m['baseline_sdm']:.2f} / cda {m['cda']:.2f} / cda_fta {m['cda_fta']:.2f}; "
              f"paired diffs {d1:+.2f}, {d2:+.2f} over {len(seeds)} seeds; {elapsed:.0f}s (limit 600s)")
    assert m["cda"] >= m["baseline_sdm"] and d1 >= 0
    assert m["cda_fta"] >= m["cda"] and d2 >= 0
    assert elapsed < 600


def test_c09_format_round_trip(criterion, tmp_path):
    rng = np.random.default_rng(6)
    shapes = [(0, 4), (1, 4), (0, 1), (1, 1)] + [(int(rng.integers(0, 64)), int(rng.integers(1, 48))) for _ in range(56)]
    same = 0
    for n, (rows, dim) in enumerate(shapes):
        data = rng.standard_cauchy(size=(rows, dim)).astype(np.float32)
        ids = rng.integers(0, 2**32, size=rows, dtype=np.uint64).astype(np.uint32) if n % 2 else None
        first, second = tmp_path / f"{n}.a", tmp_path / f"{n}.b"
        write_embeddings(first, data, ids)
        back, back_ids = read_embeddings(first)
        write_embeddings(second, back, back_ids)
        same += first.read_bytes() == second.read_bytes() and back.tobytes() == data.tobytes()
    criterion("C9 format round-trip", f"{same}/{len(shapes)} instances byte-identical (including 0-row and 1-row)")
    assert same == len(shapes) >= 50


def test_c10_determinism(criterion, tmp_path):
    def pipeline(root):
        assert cli.main(["generate", "--seed", "11", "--out", str(root / "world")]) == 0
        assert cli.main(["train", "--seed", "11", "--variant", "cda_fta", "--world", str(root / "world"),
                         "--out", str(root / "run")]) == 0
        assert cli.main(["eval", "--checkpoint", str(root / "run" / "checkpoint.json"), "--world",
                         str(root / "world"), "--out", str(root / "eval")]) == 0
        return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
                if p.is_file() and p.name != "manifest.json"}

    a, b = pipeline(tmp_path / "a"), pipeline(tmp_path / "b")
    differing = [str(k) for k in a if a[k] != b.get(k)]
    criterion("C10 determinism", f"{len(a)} artifacts compared, {len(differing)} differ")
    assert a.keys() == b.keys() and not differing
    assert any(k.suffix == ".emb" for k in a) and any(k.name == "trace.jsonl" for k in a)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
