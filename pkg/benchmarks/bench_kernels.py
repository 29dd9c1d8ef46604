"""Timing harness for the two kernel backends.

Runs the fused hot-path kernels (sequence cell forward/backward, Adam step,
pairwise IoU) on both the compiled core and the numpy fallback, checks that
they agree, and prints per-size timings with the speedup factor. Invoke from
the repo root:

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from optibox._kernels import pykernels

try:
    from optibox._kernels import _core
except ImportError:
    _core = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def lstm_case(rng, steps, embed, hidden):
    xs = rng.normal(size=(steps, embed))
    h0 = np.zeros(hidden)
    c0 = np.zeros(hidden)
    wx = rng.normal(0.0, 0.1, size=(embed, 4 * hidden))
    wh = rng.normal(0.0, 0.1, size=(hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    dhs = rng.normal(size=(steps, hidden))
    dc_last = rng.normal(size=hidden)

    def fwd(impl):
        return impl.lstm_seq_forward(xs, h0, c0, wx, wh, b)

    def bwd(impl):
        hs, cs, gates, tcs = fwd(impl)
        return impl.lstm_seq_backward(xs, h0, c0, wx, wh, hs, cs, gates,
                                      tcs, dhs, dc_last)

    return fwd, bwd


def adam_case(rng, size):
    p0 = rng.normal(size=size)
    g = rng.normal(size=size)

    def run(impl):
        p = p0.copy()
        m = np.zeros(size)
        v = np.zeros(size)
        impl.adam_update(p, g, m, v, 3, 1e-3, 0.9, 0.999, 1e-8, 5e-4)
        return p

    return run


def iou_case(rng, n, m):
    a = np.column_stack([rng.uniform(10, 90, size=(n, 2)),
                         rng.uniform(1, 40, size=(n, 2))])
    b = np.column_stack([rng.uniform(10, 90, size=(m, 2)),
                         rng.uniform(1, 40, size=(m, 2))])

    def run(impl):
        return impl.iou_matrix(a, b)

    return run


def flatten(result):
    if isinstance(result, tuple):
        return np.concatenate([np.asarray(r).ravel() for r in result])
    return np.asarray(result).ravel()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats per case (best is reported)")
    args = ap.parse_args()

    if _core is None:
        print("compiled core not built; only the numpy fallback is available")
        return

    rng = np.random.default_rng(0)
    cases = []
    for steps, embed, hidden in ((5, 32, 64), (20, 200, 512)):
        fwd, bwd = lstm_case(rng, steps, embed, hidden)
        tag = f"T={steps} E={embed} H={hidden}"
        cases.append((f"lstm forward  {tag}", fwd))
        cases.append((f"lstm backward {tag}", bwd))
    for size in (10_000, 1_000_000):
        cases.append((f"adam step     n={size}", adam_case(rng, size)))
    for n, m in ((100, 100), (1000, 1000)):
        cases.append((f"iou matrix    {n}x{m}", iou_case(rng, n, m)))

    print(f"{'case':34s} {'python':>10s} {'compiled':>10s} "
          f"{'speedup':>8s} {'max |diff|':>11s}")
    for name, fn in cases:
        out_py = flatten(fn(pykernels))
        out_c = flatten(fn(_core))
        diff = float(np.max(np.abs(out_py - out_c)))
        t_py = best_of(lambda: fn(pykernels), args.repeats)
        t_c = best_of(lambda: fn(_core), args.repeats)
        print(f"{name:34s} {t_py * 1e3:9.3f}ms {t_c * 1e3:9.3f}ms "
              f"{t_py / t_c:7.1f}x {diff:11.2e}")


if __name__ == "__main__":
    main()
