"""Time the numba and pure-numpy retrieval ranking kernels on random data.

    python3 benchmarks/bench_kernels.py --queries 3368 --gallery 15913

The defaults match the Market-1501 test split sizes.
"""
import argparse
import time

import numpy as np

from reidpatch._accel import HAS_NUMBA
from reidpatch.kernels import rank_queries


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--queries", type=int, default=3368)
    parser.add_argument("--gallery", type=int, default=15913)
    parser.add_argument("--identities", type=int, default=750)
    parser.add_argument("--cameras", type=int, default=6)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    scores = rng.standard_normal((args.queries, args.gallery))
    q_ids = rng.integers(0, args.identities, args.queries)
    g_ids = rng.integers(-1, args.identities, args.gallery)
    q_cams = rng.integers(1, args.cameras + 1, args.queries)
    g_cams = rng.integers(1, args.cameras + 1, args.gallery)
    call = lambda numba: rank_queries(scores, q_ids, q_cams, g_ids, g_cams, use_numba=numba)

    print(f"{args.queries} queries x {args.gallery} gallery items")
    t_np, ref = _time(lambda: call(False), args.repeats)
    print(f"numpy : {t_np:8.3f} s")
    if not HAS_NUMBA:
        print("numba : not installed")
        return
    call(True)  # compile outside the timed region
    t_nb, out = _time(lambda: call(True), args.repeats)
    same = np.allclose(out[0], ref[0], atol=1e-12) and np.array_equal(out[1], ref[1])
    print(f"numba : {t_nb:8.3f} s  (speedup x{t_np / t_nb:.2f}, results identical: {same})")


if __name__ == "__main__":
    main()
