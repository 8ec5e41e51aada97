"""Time the compiled kernels against the pure-Python twins.

    python benchmarks/bench_kernels.py [--draws 200000] [--repeat 3]
"""

import argparse
import timeit

import numpy as np

from scalecl import _backend


def draw_args(n_classes, per_class, n):
    slots = np.arange(n_classes * per_class, dtype=np.int64)
    return dict(
        group_cumw=np.array([1.0]),
        group_offsets=np.array([0, n_classes], dtype=np.int64),
        group_classes=np.arange(n_classes, dtype=np.int64),
        class_offsets=np.arange(0, n_classes * per_class + 1, per_class, dtype=np.int64),
        class_slots=slots,
        slot_uid=slots.copy(),
        last_seen=np.full(len(slots), _backend.NEVER, dtype=np.int64),
        rng=np.array([12345], dtype=np.uint64),
        pos=0,
        window=min(4000, len(slots) - 1),
        n=n,
        out=np.empty(n, dtype=np.int64),
    )


def bench(mod, draws, repeat):
    def draw():
        a = draw_args(120, 100, draws)
        mod.draw_entries(**{k: a[k] for k in a})

    def reservoir():
        mod.reservoir_slots(0, 500, draws, np.array([7], dtype=np.uint64))

    return {
        "draw_entries": min(timeit.repeat(draw, number=1, repeat=repeat)),
        "reservoir_slots": min(timeit.repeat(reservoir, number=1, repeat=repeat)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--draws", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if _backend.BACKEND != "cython":
        print("compiled extension not built; only the Python path is timed")
    py = bench(_backend.python_kernels, args.draws, args.repeat)
    cy = bench(_backend.kernels, args.draws, args.repeat) if _backend.BACKEND == "cython" else None
    print(f"{'kernel':<18}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, t in py.items():
        if cy:
            print(f"{name:<18}{t:>12.4f}{cy[name]:>12.4f}{t / cy[name]:>9.1f}x")
        else:
            print(f"{name:<18}{t:>12.4f}{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
