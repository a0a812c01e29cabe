"""Time the numba and numpy conv2d paths on the layer shapes used in training.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import time

import numpy as np

from scdl import kernels

# (batch, in, out, size, stride) for each conv of the default network on 64x64 input
LAYERS = [
    ("enc1", 4, 1, 8, 64, 1),
    ("enc2", 4, 8, 16, 64, 2),
    ("enc3", 4, 16, 32, 32, 2),
    ("dec0", 4, 32, 8, 16, 1),
    ("dec1", 4, 8, 8, 32, 1),
    ("dec2", 4, 8, 4, 64, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if not kernels.HAVE_NUMBA:
        print("numba unavailable; only the numpy path can run")
    print(f"{'layer':6s} {'pass':4s} {'numpy ms':>9s} {'numba ms':>9s} {'speedup':>8s} {'max diff':>9s}")
    total = {"numpy": 0.0, "numba": 0.0}
    for name, n, cin, cout, size, stride in LAYERS:
        x = rng.normal(size=(n, cin, size, size))
        w = rng.normal(size=(cout, cin, 3, 3))
        b = rng.normal(size=cout)
        out = kernels.conv2d_forward_numpy(x, w, b, stride)
        g = rng.normal(size=out.shape)
        passes = {
            "fwd": (lambda: kernels.conv2d_forward_numpy(x, w, b, stride),
                    lambda: kernels.conv2d_forward_numba(x, w, b, stride)),
            "bwd": (lambda: kernels.conv2d_backward_numpy(x, w, g, stride),
                    lambda: kernels.conv2d_backward_numba(x, w, g, stride)),
        }
        for label, (f_np, f_nb) in passes.items():
            t_np = best_of(f_np, args.repeat)
            total["numpy"] += t_np
            if kernels.HAVE_NUMBA:
                f_nb()  # compile outside the timed region
                t_nb = best_of(f_nb, args.repeat)
                total["numba"] += t_nb
                a, c = f_np(), f_nb()
                a = a if isinstance(a, tuple) else (a,)
                c = c if isinstance(c, tuple) else (c,)
                diff = max(float(np.max(np.abs(p - q))) for p, q in zip(a, c) if q is not None)
                print(f"{name:6s} {label:4s} {1e3 * t_np:9.3f} {1e3 * t_nb:9.3f} {t_np / t_nb:8.2f} {diff:9.1e}")
            else:
                print(f"{name:6s} {label:4s} {1e3 * t_np:9.3f} {'-':>9s}")
    if kernels.HAVE_NUMBA:
        print(f"total  {'':4s} {1e3 * total['numpy']:9.3f} {1e3 * total['numba']:9.3f} "
              f"{total['numpy'] / total['numba']:8.2f}")


if __name__ == "__main__":
    main()
