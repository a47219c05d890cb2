"""Time each kernel on its numba path and its numpy path.

    python3 benchmarks/bench_kernels.py [--repeat N]

The numba functions are called once before timing so compilation is not
counted.  Results agree between paths (see tests/test_kernels.py).
"""

import argparse
import timeit

import numpy as np

from ogfr import kernels


def cases(rng):
    nq, ng, k, d = 200, 400, 8, 64
    q = (rng.normal(size=(nq, d)), rng.normal(size=(nq, k, d)), rng.random((nq, k)) < 0.7)
    g = (rng.normal(size=(ng, d)), rng.normal(size=(ng, k, d)), rng.random((ng, k)) < 0.7)
    dist = rng.random((nq, ng))
    rank = (dist, rng.integers(0, 50, nq), rng.integers(0, 50, ng), rng.integers(0, 4, nq), rng.integers(0, 4, ng), 10)
    x = rng.normal(size=(64, 32))
    hard = (np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1)), np.repeat(np.arange(16), 4))
    states = rng.dirichlet(np.ones(9), size=(4096, 32))
    probs = rng.uniform(0.1, 0.9, size=(4096, 32))
    score = (states, (rng.random((4096, 32)) < probs).astype(float), probs, rng.normal(size=4096))
    counts = (rng.integers(0, 9, size=(64, 64, 32)), np.array([-1, 0, 1, 1, 2, 3, 3, 3, 3]), 4)
    return {
        "gated_distances (200x400, K=8, D=64)": ("_gated_distances", (*q, *g)),
        "rank_metrics (200x400)": ("_rank_metrics", rank),
        "batch_hard_indices (64x64)": ("_batch_hard", hard),
        "score_function_grad (4096x32x9)": ("_score_grad", score),
        "coarse_counts (64x64x32)": ("_coarse_counts", counts),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
    print(f"{'kernel':<40s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for label, (stem, inputs) in cases(np.random.default_rng(0)).items():
        np_fn = getattr(kernels, stem + "_np")
        nb_fn = getattr(kernels, stem + "_nb")
        nb_fn(*inputs)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<40s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
