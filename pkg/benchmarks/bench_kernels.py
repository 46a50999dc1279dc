"""Benchmark the compiled scan kernels against the NumPy fallback.

Times the two hot paths of the pipeline, batch top-k retrieval and
distractor-map construction, on each available backend:

    python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import time

import numpy as np

from landrec import kernels


def timeit(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(quick=False):
    rng = np.random.default_rng(0)
    if quick:
        cases = [("topk 10k x 128, 50 queries", 10_000, 128, 50, 7),
                 ("topn 10k x 128, 1k pool", 10_000, 128, 1_000, 3)]
    else:
        cases = [("topk 50k x 256, 200 queries", 50_000, 256, 200, 7),
                 ("topk 100k x 512, 100 queries", 100_000, 512, 100, 7),
                 ("topn 50k x 256, 2k pool", 50_000, 256, 2_000, 3)]

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default: {kernels.backend_name()})")
    header = f"{'case':38s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}"
    print(header)
    print("-" * len(header))
    for name, n_rows, dim, other, k in cases:
        matrix = rng.standard_normal((n_rows, dim)).astype(np.float32)
        probe = rng.standard_normal((other, dim)).astype(np.float32)
        times = {}
        for backend in backends:
            if name.startswith("topk"):
                fn = lambda b=backend: kernels.topk_search(probe, matrix, k,
                                                           threads=4, backend=b)
            else:
                fn = lambda b=backend: kernels.topn_mean(matrix, probe, k,
                                                         threads=4, backend=b)
            times[backend] = timeit(fn, repeats=2 if quick else 3)
        row = f"{name:38s}" + "".join(f"{times[b]:>11.3f}s" for b in backends)
        if len(backends) == 2:
            row += f"{times[backends[1]] / times[backends[0]]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller workloads")
    bench(quick=parser.parse_args().quick)
