"""Compare the compiled and numpy kernel backends on representative inputs.

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import math
import timeit

import numpy as np

from regionvad import _pykernels, kernels


def _cases(rng):
    X = rng.normal(size=(20000, 6))
    means = rng.normal(size=(8, 6))
    prec = np.ascontiguousarray(np.stack([np.eye(6) / math.sqrt(1 + i) for i in range(8)]))
    logdet = np.array([-3.0 * math.log(1 + i) for i in range(8)])
    heat = np.zeros((96, 128, 21))
    channels = np.array([0, 5, 16], dtype=np.int64)
    u = rng.normal(size=(480, 640)) * 3
    v = rng.normal(size=(480, 640)) * 3
    starts = rng.integers(0, 5000, size=20000)
    stops = starts + rng.integers(1, 10, size=20000)
    vals = rng.normal(size=20000)
    return {
        "component_log_prob": lambda m: m.component_log_prob(X, means, prec, logdet),
        "deposit": lambda m: [m.deposit(heat, 20, 60, 10, 70, 40.0, 40.0, 15.0, channels)
                              for _ in range(50)],
        "flow_histogram": lambda m: m.flow_histogram(u, v, 0, 640, 0, 480, 1.5),
        "frame_max": lambda m: m.frame_max(starts, stops, vals, 5010),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {"python": _pykernels}
    if "cython" in kernels.available_backends():
        backends["cython"] = kernels.use_backend("cython")
    else:
        print("compiled backend not built; timing the numpy fallback only")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases.items():
        times = {b: min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat))
                 for b, m in backends.items()}
        row = f"{name:<20}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times.values())
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
