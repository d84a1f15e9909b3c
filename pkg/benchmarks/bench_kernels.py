"""Time the compiled kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--n 200000] [--repeats 7]

Also checks that both backends agree before timing them.
"""

import argparse
import time

import numpy as np

from fmpe import _kernels_py as py
from fmpe.kernels import available_backends


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()
    if "compiled" not in available_backends():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    ck = available_backends()["compiled"]

    rng = np.random.default_rng(0)
    z = rng.standard_normal((args.n // 64, 64))
    a = rng.standard_normal((2000, 2))
    b = rng.standard_normal((2000, 2))
    cases = {
        "gelu": lambda m: m.gelu(z),
        "sigmoid": lambda m: m.sigmoid(z),
        "rbf_pair_sum": lambda m: m.rbf_pair_sum(a, b, 1.0, False),
        "rbf_pair_sum_u": lambda m: m.rbf_pair_sum(a, a, 1.0, True),
    }
    print(f"{'kernel':16s} {'numpy (s)':>11s} {'compiled (s)':>13s} {'speedup':>8s}")
    for name, call in cases.items():
        np.testing.assert_allclose(call(ck), call(py), rtol=1e-10, atol=1e-12)
        t_py = best_of(lambda: call(py), args.repeats)
        t_c = best_of(lambda: call(ck), args.repeats)
        print(f"{name:16s} {t_py:11.5f} {t_c:13.5f} {t_py / t_c:8.2f}")


if __name__ == "__main__":
    main()
