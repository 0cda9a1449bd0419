"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size 256]

Both paths run in the same process; the first numba call (compilation or
cache load) is excluded and reported separately. Outputs are checked to be
identical before timing.
"""

import argparse
import time

import numpy as np

from zonebench import kernels
from zonebench.augment import GeometricTransform, TransformKind


def zone_polygons(size, rng):
    """A handful of ellipses shaped like the phantom zones, packed for the fill kernel."""
    verts, offsets, labels = [], [0], []
    c = size / 2
    for label, (rx, ry, n) in zip((1, 2, 3, 4), ((0.3, 0.22, 32), (0.18, 0.13, 24), (0.12, 0.08, 16), (0.05, 0.05, 12))):
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        jitter = 1 + 0.05 * rng.standard_normal(n)
        xs = np.round(c + size * rx * jitter * np.cos(t))
        ys = np.round(c + size * ry * jitter * np.sin(t))
        verts.append(np.stack([xs, ys], 1))
        offsets.append(offsets[-1] + n)
        labels.append(label)
    return (
        np.clip(np.concatenate(verts), 0, size - 1).astype(np.int64),
        np.array(offsets, dtype=np.int64),
        np.array(labels, dtype=np.uint8),
    )


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--size", type=int, default=256)
    args = parser.parse_args()
    n = args.size
    rng = np.random.default_rng(0)

    verts, offsets, labels = zone_polygons(n, rng)
    image = rng.random((n, n))
    mask = rng.integers(0, 5, (n, n)).astype(np.uint8)
    t = GeometricTransform(1, TransformKind.ROTATE_ZOOM, angle=12.5, scale=1.1)
    src_x, src_y = t.source_coords(n, n)

    cases = {
        "fill_polygons": (kernels._fill_polygons_jit, kernels._fill_polygons_np,
                          lambda: (verts, offsets, labels, np.zeros((n, n), np.uint8))),
        "warp_bilinear": (kernels._warp_bilinear_jit, kernels._warp_bilinear_np,
                          lambda: (image, src_x, src_y, np.empty((n, n)))),
        "warp_nearest": (kernels._warp_nearest_jit, kernels._warp_nearest_np,
                         lambda: (mask, src_x, src_y, np.empty((n, n), np.uint8))),
    }

    print(f"grid {n}x{n}, best of {args.repeat}, numba enabled at import: {kernels.USE_NUMBA}")
    print(f"{'kernel':<15}{'first call':>12}{'numba':>12}{'numpy':>12}{'speedup':>10}")
    for name, (jit, ref, make_args) in cases.items():
        start = time.perf_counter()
        a = jit(*make_args())
        first = time.perf_counter() - start
        b = ref(*make_args())
        if not np.array_equal(a, b):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_jit = best_of(lambda: jit(*make_args()), args.repeat)
        t_np = best_of(lambda: ref(*make_args()), args.repeat)
        print(f"{name:<15}{first * 1e3:>10.1f}ms{t_jit * 1e3:>10.3f}ms{t_np * 1e3:>10.3f}ms{t_np / t_jit:>9.1f}x")


if __name__ == "__main__":
    main()
