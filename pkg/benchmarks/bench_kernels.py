"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is warmed up once (numba compilation excluded) and then timed
on identical inputs; outputs are checked for agreement before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mlip.kernels import sinkhorn_numba, sinkhorn_numpy, transe_epochs_numba, transe_epochs_numpy
from mlip.knowledge import build_toy_graph, corrupt_triples


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_sinkhorn(repeat: int):
    rng = np.random.default_rng(0)
    rows = []
    for B, C, iters in ((16, 8, 3), (160, 8, 50), (1024, 32, 50)):
        scores = rng.uniform(-1, 1, size=(B, C))
        a = sinkhorn_numpy(scores, 0.05, iters)
        b = sinkhorn_numba(scores, 0.05, iters)
        assert np.allclose(a, b, atol=1e-12), "sinkhorn paths disagree"
        t_np = best_of(lambda: sinkhorn_numpy(scores, 0.05, iters), repeat)
        t_nb = best_of(lambda: sinkhorn_numba(scores, 0.05, iters), repeat)
        rows.append((f"sinkhorn B={B} C={C} iters={iters}", t_np, t_nb))
    return rows


def bench_transe(repeat: int):
    rows = []
    for K, r, epochs in ((4, 3, 200), (16, 8, 200)):
        g = build_toy_graph(K, r, seed=0)
        rng = np.random.default_rng(0)
        E0 = rng.standard_normal((g.n_entities, 32))
        E0 /= np.linalg.norm(E0, axis=1, keepdims=True)
        R0 = rng.standard_normal((g.n_relations, 32)) * 0.1
        neg = corrupt_triples(g, epochs, rng)
        orders = np.stack([rng.permutation(len(g.triples)) for _ in range(epochs)])
        triples = np.ascontiguousarray(g.triples)

        def run(fn):
            E, R = E0.copy(), R0.copy()
            fn(E, R, triples, neg, orders, 1.0, 0.01)
            return E

        assert np.allclose(run(transe_epochs_numpy), run(transe_epochs_numba), atol=1e-9), "TransE paths disagree"
        t_np = best_of(lambda: run(transe_epochs_numpy), repeat)
        t_nb = best_of(lambda: run(transe_epochs_numba), repeat)
        rows.append((f"transe K={K} r={r} epochs={epochs} triples={len(triples)}", t_np, t_nb))
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rows = bench_sinkhorn(args.repeat) + bench_transe(args.repeat)
    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'numba ms':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{width}}  {t_np * 1e3:10.3f}  {t_nb * 1e3:10.3f}  {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
