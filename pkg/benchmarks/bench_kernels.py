"""Time the numba kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel runs once first (so JIT compilation is not timed), then both
outputs are checked for equality before timing. Prints one row per kernel
with the best-of-``repeat`` time of each backend and the speed-up.
"""

import argparse
import timeit

import numpy as np

from lczmap import _kernels
from lczmap.forest import ForestParams, features_from_patches, train_rf_features


def cases(quick: bool, rng):
    n = 16 if quick else 96
    x = rng.standard_normal((n, 96, 34, 34)).astype(np.float32)
    yield "im2col 96ch k3 32px", lambda b: b.im2col(x, 3, 32, 32)

    a = rng.standard_normal((n, 64, 32, 32)).astype(np.float32)
    yield "maxpool2 forward", lambda b: b.maxpool2_forward(a)

    out, arg = _kernels.numpy_backend.maxpool2_forward(a)
    yield "maxpool2 backward", lambda b: b.maxpool2_backward(out, arg)

    m = 400 if quick else 3000
    xs = np.sort(rng.standard_normal(m).astype(np.float32))
    ys = rng.integers(0, 17, m).astype(np.int64)
    yield "gini split scan", lambda b: b.split_scan(xs, ys, 17, 1)

    patches = rng.standard_normal((600, 10, 8, 8)).astype(np.float32)
    X = features_from_patches(patches)
    y = rng.integers(0, 17, len(X))
    tree = train_rf_features(X, y, ForestParams(n_trees=1), seed=0).trees[0]
    Xq = np.repeat(X, 20 if quick else 200, axis=0)
    yield "tree apply", lambda b: b.apply_tree(tree.feature, tree.threshold, tree.left, tree.right, Xq)


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small inputs, for a smoke run")
    args = ap.parse_args()

    nb, npb = _kernels.numba_backend, _kernels.numpy_backend
    if nb is None:
        raise SystemExit("numba backend unavailable (is LCZMAP_DISABLE_NUMBA set?)")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}")
    for name, fn in cases(args.quick, rng):
        ref, got = fn(npb), fn(nb)
        if not same(ref, got):
            raise SystemExit(f"{name}: backends disagree")
        t_nb = min(timeit.repeat(lambda: fn(nb), number=1, repeat=args.repeat))
        t_np = min(timeit.repeat(lambda: fn(npb), number=1, repeat=args.repeat))
        print(f"{name:<22}{t_nb * 1e3:>10.2f}{t_np * 1e3:>10.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
