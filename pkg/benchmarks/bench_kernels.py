"""Benchmark the compiled kernel core against the pure numpy fallback.

Runs the hot kernels on realistic sizes (including the full-frame
1280x640x19 case) and prints a table of best-of-N timings plus speedups.

    python benchmarks/bench_kernels.py [--repeats N] [--quick]
"""

import argparse
import time

import numpy as np

from ripu import _kernels
from ripu.scoring import RA, RegionSpec, acquisition_map
from ripu.tensors import PredictionMap


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def random_probs(rng, h, w, c):
    logits = rng.standard_normal((h, w, c)).astype(np.float32)
    e = np.exp(logits - logits.max(axis=2, keepdims=True))
    return (e / e.sum(axis=2, keepdims=True)).astype(np.float64)


def kernel_cases(rng, quick):
    sizes = [(256, 256, 8)] if quick else [(256, 256, 8), (640, 1280, 19)]
    for h, w, c in sizes:
        labels = rng.integers(0, c, (h, w)).astype(np.uint16)
        probs = random_probs(rng, h, w, c)
        field = rng.random((h, w))
        for k in (1, 32):
            yield (
                f"label_window_counts {h}x{w} C={c} k={k}",
                lambda impl, labels=labels, k=k, c=c: impl.label_window_counts(labels, k, c),
            )
        yield (
            f"entropy_map {h}x{w} C={c}",
            lambda impl, probs=probs: impl.entropy_map(probs),
        )
        yield (
            f"window_sums {h}x{w} k=32",
            lambda impl, field=field: impl.window_sums(field, 32),
        )
    h, w = (128, 128) if quick else (640, 1280)
    score = rng.random((h, w))
    eligible = np.ones((h, w), dtype=bool)
    cost = _kernels.region_sizes(h, w, 1).astype(np.int64)
    budget = int(0.022 * h * w)
    yield (
        f"greedy_select {h}x{w} budget={budget}",
        lambda impl: impl.greedy_select(score, eligible, cost, 1, budget),
    )


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="small sizes only")
    args = parser.parse_args()

    backends = {name: _kernels.get_backend(name) for name in _kernels.available_backends()}
    if "compiled" not in backends:
        print("note: compiled core not built; showing python fallback only")

    rng = np.random.default_rng(0)
    rows = []
    for name, call in kernel_cases(rng, args.quick):
        times = {b: best_of(lambda impl=impl: call(impl), args.repeats) for b, impl in backends.items()}
        rows.append((name, times))

    width = max(len(r[0]) for r in rows)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name, times in rows:
        line = f"{name:<{width}}  " + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['compiled']:>9.1f}x"
        print(line)

    # end-to-end acquisition map on the full-frame case, default backend
    if not args.quick:
        pm = PredictionMap(random_probs(rng, 640, 1280, 19))
        for k in (1, 32):
            dt = best_of(lambda: acquisition_map(pm, RegionSpec.square(k), RA), args.repeats)
            print(f"\nacquisition_map 640x1280x19 k={k} [{_kernels.BACKEND}]: {dt:.3f} s")


if __name__ == "__main__":
    main()
