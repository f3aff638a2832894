"""Time the numba and numpy kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--size 104] [--repeat 5] [--network]

Each case is warmed up once (numba compiles on first call), then timed as
the best of ``--repeat`` runs. Outputs of the two backends are compared too.
"""
import argparse
import time

import numpy as np

from chanprune import fixture_path, kernels
from chanprune.cfg import load_cfg
from chanprune.inference import run_network
from chanprune.weights import random_store


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size, rng):
    x = rng.standard_normal((64, size, size)).astype(np.float32)
    w3 = rng.standard_normal((128, 64, 3, 3)).astype(np.float32)
    w1 = rng.standard_normal((128, 64, 1, 1)).astype(np.float32)
    return {
        "conv 3x3 64->128": lambda: kernels.conv2d(x, w3, 1, 1),
        "conv 3x3 s2 64->128": lambda: kernels.conv2d(x, w3, 2, 1),
        "conv 1x1 64->128": lambda: kernels.conv2d(x, w1, 1, 0),
        "maxpool 2 s2": lambda: kernels.maxpool2d(x, 2, 2),
        "maxpool 13 s1 (SPP)": lambda: kernels.maxpool2d(x, 13, 1),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=104, help="feature map side")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--network", action="store_true", help="also time a yolov3-tiny forward at 416")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    rng = np.random.default_rng(args.seed)
    table = cases(args.size, rng)
    if args.network:
        net = load_cfg(fixture_path("yolov3-tiny"))
        store = random_store(net, rng)
        img = rng.uniform(-1, 1, (3, 416, 416)).astype(np.float32)
        table["yolov3-tiny forward @416"] = lambda: run_network(net, store, img, decode=False).outputs[-1]

    print(f"{'case':<28}" + "".join(f"{b + ' ms':>12}" for b in backends)
          + ("   speedup   max|diff|" if len(backends) == 2 else ""))
    rows = []
    for name, fn in table.items():
        times, outs = [], []
        for b in backends:
            with kernels.use_backend(b):
                times.append(best_of(fn, args.repeat))
                outs.append(fn())
        line = f"{name:<28}" + "".join(f"{1e3 * t:>12.2f}" for t in times)
        if len(backends) == 2:
            diff = float(np.max(np.abs(outs[0].astype(np.float64) - outs[1])))
            line += f"   {times[1] / times[0]:>6.1f}x   {diff:.1e}"
        print(line)
        rows.append((name, times))
    return rows


if __name__ == "__main__":
    main()
