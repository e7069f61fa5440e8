"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--frames N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from affectcal import kernels


def cases(n: int, rng: np.random.Generator):
    k = 8
    logp = np.log(rng.dirichlet(np.ones(k), size=n))
    truth = rng.integers(0, k, n)
    bias = np.zeros(k)
    grid = np.round(np.arange(-20, 21) * 0.1, 10)
    scores = rng.random(n)
    binary = rng.integers(0, 2, n)
    probs = rng.dirichlet(np.ones(k), size=n)
    index = rng.integers(0, n, 4 * n)
    values = rng.random(4 * n)
    pred = rng.integers(0, k, n)
    return {
        "bias_sweep": lambda b: b.bias_sweep(logp, truth, bias, 3, grid),
        "threshold_sweep": lambda b: b.threshold_sweep(scores, binary, grid),
        "window_mean(T=16)": lambda b: b.window_mean(probs, 8),
        "scatter_mean": lambda b: b.scatter_mean(index, values, n),
        "confusion_matrix": lambda b: b.confusion_matrix(pred, truth, k),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--frames", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    compiled = kernels.compiled_backend
    if compiled is None:
        print("compiled backend unavailable; timing the numpy fallback only")
    backends = [("python", kernels.python_backend)] + ([("cython", compiled)] if compiled else [])

    print(f"{'kernel':<20}" + "".join(f"{name:>12}" for name, _ in backends) + ("     speedup" if compiled else ""))
    for label, fn in cases(args.frames, np.random.default_rng(0)).items():
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) for _, b in backends]
        row = f"{label:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if compiled:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
