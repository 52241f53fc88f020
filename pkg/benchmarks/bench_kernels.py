"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from priordetr import _kernels as K


def cases():
    rng = np.random.default_rng(0)
    # one SDFPR call at the first backbone stage: 4 images, 32 channels, 8x8, 9 points x 4 groups
    feat = rng.normal(size=(16, 8, 8, 8))
    loc = rng.uniform(-1, 9, size=(16, 64 * 9, 2))
    grad = rng.normal(size=(16, 8, 64 * 9))
    cost = rng.random((30, 2))
    big = rng.random((200, 150))
    yield "bilinear_forward", lambda impl: impl.bilinear_forward(feat, loc)
    yield "bilinear_backward", lambda impl: impl.bilinear_backward(grad, feat, loc)
    yield "assignment 30x2", lambda impl: impl.linear_sum_assignment(cost)
    yield "assignment 200x150", lambda impl: impl.linear_sum_assignment(big)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.compiled is None:
        print("compiled extension not available; only the fallback is timed")
    print(f"{'kernel':<22} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fn in cases():
        number = 20
        t_np = min(timeit.repeat(lambda: fn(K.fallback), number=number, repeat=args.repeat)) / number
        if K.compiled is not None:
            t_c = min(timeit.repeat(lambda: fn(K.compiled), number=number, repeat=args.repeat)) / number
            print(f"{name:<22} {t_c * 1e3:>10.3f} {t_np * 1e3:>10.3f} {t_np / t_c:>7.1f}x")
        else:
            print(f"{name:<22} {'-':>10} {t_np * 1e3:>10.3f} {'-':>8}")


if __name__ == "__main__":
    main()
