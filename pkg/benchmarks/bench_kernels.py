"""Compare the numba and numpy kernels, plus an end-to-end campaign.

    python benchmarks/bench_kernels.py [--n 1000000]

The campaign timing uses whichever backend the package picked at import; run
once more with LEAKFIX_NO_NUMBA=1 to time the numpy path end to end.
"""
import argparse
import time

import numpy as np

from leakfix import _kernels
from leakfix.corpus import get_entry
from leakfix.model import ModelConfig
from leakfix.pipeline import campaign


def best_of(fn, repeat=5):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--traces", type=int, default=20_000)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    words = rng.integers(0, 1 << 32, args.n, dtype=np.uint64).astype(np.uint32)
    block = rng.normal(size=(8192, 600))
    zeros = np.zeros(block.shape[1])

    print(f"backend at import: {_kernels.BACKEND}")
    rows = [("popcount", "numpy", best_of(lambda: _kernels.popcount_numpy(words)))]
    rows.append(("welford 8192x600", "numpy",
                 best_of(lambda: _kernels.welford_batch_numpy(0, zeros, zeros, block))))
    if _kernels.NUMBA_OK:
        rows.insert(1, ("popcount", "numba", best_of(lambda: _kernels.popcount_numba(words))))
        rows.append(("welford 8192x600", "numba",
                     best_of(lambda: _kernels.welford_batch_numba(0, zeros, zeros, block))))
        a = _kernels.popcount_numba(words)
        assert np.array_equal(a, _kernels.popcount_numpy(words))
        n1, m1, v1 = _kernels.welford_batch_numba(0, zeros, zeros, block)
        n2, m2, v2 = _kernels.welford_batch_numpy(0, zeros, zeros, block)
        assert n1 == n2 and np.allclose(m1, m2) and np.allclose(v1, v2)
    for name, backend, t in rows:
        print(f"{name:<18} {backend:<6} {t * 1e3:9.2f} ms")

    entry = get_entry("quarter-round")
    fixed = [np.frombuffer(entry.fixed_input, dtype=np.uint8)]
    t = best_of(lambda: campaign(entry.program, entry.binding, ModelConfig.default(), fixed,
                                 args.traces, 4.5, 0), repeat=3)
    print(f"campaign quarter-round {args.traces} traces [{_kernels.BACKEND}]: {t:.3f} s")


if __name__ == "__main__":
    main()
