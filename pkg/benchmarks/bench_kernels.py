"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Names ending in ``[1]`` time a single-row batch.  Each numba kernel is called once before timing so compilation is excluded.
"""

import argparse
import timeit

import numpy as np

from bta import _kernels as K


def cases(rng):
    X = rng.normal(0, 0.01, (2000, 50))
    U, c, v = rng.normal(0, 0.3, (8, 50)), rng.normal(0, 0.1, 8), rng.normal(0, 0.5, 8)
    y = rng.normal(0, 0.01, 2000)
    perm = rng.permutation(2000)
    window = rng.normal(0, 0.01, (200, 50))
    path = 1000 * np.exp(np.cumsum(rng.normal(0, 0.01, 5000)))

    def sgd(fn):
        state = [a.copy() for a in (U, c, v, np.array([0.0]))]
        moments = [np.zeros_like(a) for a in state]
        return lambda: fn(X, y, perm, *state, *moments, 0.01, 0.9, 32, 1e-4)

    x1 = X[:1]
    return {
        "mlp_forward": lambda fn: (lambda: fn(X, U, c, v, 0.0)),
        "mlp_forward[1]": lambda fn: (lambda: fn(x1, U, c, v, 0.0)),
        "mlp_input_grad": lambda fn: (lambda: fn(X, U, c, v)),
        "mlp_input_grad[1]": lambda fn: (lambda: fn(x1, U, c, v)),
        "mlp_sgd_epoch": sgd,
        "moving_median": lambda fn: (lambda: fn(window, 5)),
        "max_drawdown": lambda fn: (lambda: fn(path)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel (rows)':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, make in cases(np.random.default_rng(0)).items():
        times = {}
        for suffix in ("np", "nb"):
            call = make(getattr(K, f"{name.split('[')[0]}_{suffix}"))
            call()
            number = 1000 if name.endswith("]") else 10
            times[suffix] = min(timeit.repeat(call, number=number, repeat=args.repeat)) / number * 1e3
        print(f"{name:<20}{times['np']:>12.3f}{times['nb']:>12.3f}{times['np'] / times['nb']:>9.1f}x")


if __name__ == "__main__":
    main()
