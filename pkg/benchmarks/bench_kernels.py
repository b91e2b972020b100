"""Time the numba and numpy kernel backends on network-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is called once per backend before timing so numba compilation is
excluded.  Reported numbers are the best of ``--repeat`` wall-clock runs.
"""
import argparse
import json
import platform
import time

import numpy as np

from ear3d import _accel, kernels


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    xp = rng.standard_normal((1, 8, 10, 66, 66)).astype(np.float32)
    w = rng.standard_normal((8, 8, 3, 3, 3)).astype(np.float32)
    out_shape = (8, 64, 64)
    g = rng.standard_normal((1, 8) + out_shape).astype(np.float32)
    pool_in = rng.standard_normal((1, 8, 8, 64, 64)).astype(np.float32)
    _, arg = kernels.maxpool_forward_numpy(pool_in, (1, 2, 2))
    pool_g = rng.standard_normal((1, 8, 8, 32, 32)).astype(np.float32)
    q, k, v = (rng.standard_normal((8, 1024, 8)).astype(np.float32) for _ in range(3))
    _, probs = kernels.attention_forward(q, k, v)
    ga = rng.standard_normal(q.shape).astype(np.float32)
    img = rng.random((256, 256)) < 0.45
    return {
        "conv_forward 1x8x8x64x64 k3": lambda: kernels.conv_forward(xp, w, (1, 1, 1), out_shape),
        "conv_backward 1x8x8x64x64 k3": lambda: kernels.conv_backward(g, xp, w, (1, 1, 1), out_shape),
        "maxpool_forward 1x8x8x64x64": lambda: kernels.maxpool_forward(pool_in, (1, 2, 2)),
        "maxpool_backward 1x8x8x64x64": lambda: kernels.maxpool_backward(pool_g, arg, pool_in.shape, (1, 2, 2)),
        "attention_backward 8x1024x8": lambda: kernels.attention_backward(ga, q, k, v, probs),
        "label4 256x256": lambda: kernels.label4(img),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    table = {}
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for backend in ("numba", "numpy"):
            prev = _accel.set_backend(backend)
            try:
                row[backend] = _best(fn, args.repeat)
            finally:
                _accel.set_backend(prev)
        table[name] = row
    print(f"{platform.processor() or platform.machine()}, numba threads: "
          f"{_accel.numba.get_num_threads()}")
    print(f"{'kernel':34s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, row in table.items():
        print(f"{name:34s} {row['numba'] * 1e3:10.2f} {row['numpy'] * 1e3:10.2f} "
              f"{row['numpy'] / row['numba']:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(table, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
