"""Compare the compiled kernels with the numpy fallback on retrieval-sized inputs.

    python3 benchmarks/bench_kernels.py [--queries 500] [--gallery 2000] [--dim 64]
"""
import argparse
import timeit

import numpy as np

from fuzzyalign._kernels import _pykernels

try:
    from fuzzyalign._kernels import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--gallery", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--ids", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    q = rng.normal(size=(args.queries, args.dim))
    g = rng.normal(size=(args.gallery, args.dim))
    qids = rng.integers(0, args.ids, args.queries)
    gids = np.concatenate([qids, rng.integers(0, args.ids, args.gallery - args.queries)])
    sim = _pykernels.cosine_matrix(q, g)
    order = _pykernels.rank_desc(sim)

    impls = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    cases = {
        "cosine_matrix": lambda m: (lambda: m.cosine_matrix(q, g)),
        "rank_desc": lambda m: (lambda: m.rank_desc(sim)),
        "score_ranked": lambda m: (lambda: m.score_ranked(order, qids, gids)),
    }
    print(f"Q={args.queries} G={args.gallery} D={args.dim}")
    print(f"{'kernel':15s}" + "".join(f"{name:>12s}" for name, _ in impls) + ("   speedup" if _ckernels else ""))
    for case, make in cases.items():
        times = [best_of(make(m), args.repeat) for _, m in impls]
        line = f"{case:15s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
        if len(times) == 2:
            line += f"  {times[0] / times[1]:7.2f}x"
        print(line)
    if _ckernels is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
