"""Compare the compiled and pure-Python rotated-IoU kernels.

    python benchmarks/bench_kernels.py [--n 400] [--repeat 3]

Prints the best wall time of each kernel per backend, the speedup and whether
the two backends agree bit for bit.
"""

import argparse
import time

import numpy as np

from bevhead import _pykernels

try:
    from bevhead import _ckernels
except ImportError:
    _ckernels = None


def random_boxes(n, rng, spread=20.0):
    xy = rng.uniform(-spread, spread, size=(n, 2))
    lw = rng.uniform(0.5, 6.0, size=(n, 2))
    theta = rng.uniform(-np.pi, np.pi, size=(n, 1))
    return np.hstack([xy, lw, theta])


def best_time(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=400, help="boxes per set")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    a, b = random_boxes(args.n, rng), random_boxes(args.n, rng)
    # crowded set so that NMS does real work
    crowd = random_boxes(args.n, rng, spread=6.0)
    order = np.argsort(-rng.random(args.n))

    cases = {
        f"iou_bev_pairs  n={args.n}": lambda k: k.iou_bev_pairs(a, b),
        f"iou_bev_matrix {args.n}x{args.n}": lambda k: k.iou_bev_matrix(a, b),
        f"nms_bev        n={args.n}": lambda k: k.nms_bev(crowd, order, 0.1),
    }
    if _ckernels is None:
        print("compiled kernels not built; timing the Python backend only")
    print(f"{'kernel':<28}{'python s':>12}{'cython s':>12}{'speedup':>10}  identical")
    for name, run in cases.items():
        tp, op = best_time(lambda: run(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<28}{tp:>12.4f}{'-':>12}{'-':>10}  -")
            continue
        tc, oc = best_time(lambda: run(_ckernels), args.repeat)
        same = np.array_equal(np.asarray(op), np.asarray(oc))
        print(f"{name:<28}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
