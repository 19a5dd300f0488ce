"""Time the compiled and numpy geometry kernels side by side.

    python3 benchmarks/bench_geometry.py [--sizes 256,1024,2048] [--repeat 3]
"""
import argparse
import timeit

import numpy as np

from dmfnet import geometry


def cases(n, rng):
    pts = rng.normal(size=(n, 3))
    half = pts[: n // 2]
    return {
        "pairwise_sq_dist": lambda b: b.pairwise_sq_dist(pts, pts),
        "knn k=16": lambda b: b.knn(pts, pts, 16),
        "fps n/4": lambda b: b.fps(pts, n // 4),
        "nearest": lambda b: b.nearest(half, pts),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", default="256,1024,2048")
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    backends = geometry.backends()
    if "cython" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    names = list(backends)
    print(f"{'kernel':<18}{'n':>6}" + "".join(f"{b + ' ms':>14}" for b in names)
          + ("    speedup" if len(names) > 1 else ""))
    for n in (int(s) for s in args.sizes.split(",")):
        for label, fn in cases(n, rng).items():
            times = []
            for b in names:
                impl = backends[b]
                times.append(min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) * 1e3)
            line = f"{label:<18}{n:>6}" + "".join(f"{t:>14.2f}" for t in times)
            if len(times) > 1:
                line += f"{times[0] / times[1]:>10.1f}x"
            print(line)


if __name__ == "__main__":
    main()
