"""Hot pixel loops: polygon fill and resampling.

Each kernel exists twice, a numba version (``*_jit``) and a vectorised numpy
version (``*_np``). The public names pick one according to
:data:`zonebench._accel.USE_NUMBA`; both must agree bit for bit.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- polygon fill
#
# Polygons arrive packed: ``verts`` is (N, 2) int64 of (x, y), polygon k owns
# rows ``offsets[k]:offsets[k+1]`` and paints ``labels[k]``. Labels are painted
# with max(), which is the overlap precedence because TUM > TZ > PZ > CZ > BG
# numerically. Integer cross products keep the inside test exact.


@njit(cache=True)
def _fill_polygons_jit(verts, offsets, labels, out):
    height, width = out.shape
    for k in range(labels.shape[0]):
        lo = offsets[k]
        hi = offsets[k + 1]
        n = hi - lo
        label = labels[k]
        xmin = verts[lo, 0]
        xmax = xmin
        ymin = verts[lo, 1]
        ymax = ymin
        for i in range(lo, hi):
            xmin = min(xmin, verts[i, 0])
            xmax = max(xmax, verts[i, 0])
            ymin = min(ymin, verts[i, 1])
            ymax = max(ymax, verts[i, 1])
        xmin = max(xmin, 0)
        ymin = max(ymin, 0)
        xmax = min(xmax, width - 1)
        ymax = min(ymax, height - 1)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                if out[py, px] >= label:
                    continue
                inside = False
                on_edge = False
                for e in range(n):
                    x1 = verts[lo + e, 0]
                    y1 = verts[lo + e, 1]
                    x2 = verts[lo + (e + 1) % n, 0]
                    y2 = verts[lo + (e + 1) % n, 1]
                    cross = (x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)
                    if (
                        cross == 0
                        and min(x1, x2) <= px <= max(x1, x2)
                        and min(y1, y2) <= py <= max(y1, y2)
                    ):
                        on_edge = True
                        break
                    if (y1 > py) != (y2 > py):
                        # ray towards +x crosses edge iff px < x_intersect
                        if y2 > y1:
                            if cross > 0:
                                inside = not inside
                        elif cross < 0:
                            inside = not inside
                if on_edge or inside:
                    out[py, px] = label
    return out


def _fill_polygons_np(verts, offsets, labels, out):
    height, width = out.shape
    for k in range(labels.shape[0]):
        poly = verts[offsets[k] : offsets[k + 1]]
        x0, y0 = np.maximum(poly.min(axis=0), 0)
        x1, y1 = np.minimum(poly.max(axis=0), (width - 1, height - 1))
        if x1 < x0 or y1 < y0:
            continue
        py, px = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        inside = np.zeros(px.shape, dtype=bool)
        on_edge = np.zeros(px.shape, dtype=bool)
        nxt = np.roll(poly, -1, axis=0)
        for (ax, ay), (bx, by) in zip(poly, nxt):
            cross = (bx - ax) * (py - ay) - (px - ax) * (by - ay)
            on_edge |= (
                (cross == 0)
                & (px >= min(ax, bx))
                & (px <= max(ax, bx))
                & (py >= min(ay, by))
                & (py <= max(ay, by))
            )
            straddles = (ay > py) != (by > py)
            hit = cross > 0 if by > ay else cross < 0
            inside ^= straddles & hit
        window = out[y0 : y1 + 1, x0 : x1 + 1]
        np.maximum(window, np.where(inside | on_edge, labels[k], 0).astype(out.dtype), out=window)
    return out


# ---------------------------------------------------------------- resampling
#
# ``src_x``/``src_y`` give, for every output pixel, the source coordinate to
# read. Reads outside the frame contribute 0 (intensity 0 / label BG).


@njit(cache=True)
def _warp_bilinear_jit(image, src_x, src_y, out):
    height, width = image.shape
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            x = src_x[r, c]
            y = src_y[r, c]
            x0 = int(np.floor(x))
            y0 = int(np.floor(y))
            fx = x - x0
            fy = y - y0
            acc = 0.0
            for dy in range(2):
                wy = fy if dy == 1 else 1.0 - fy
                yy = y0 + dy
                if wy == 0.0 or yy < 0 or yy >= height:
                    continue
                for dx in range(2):
                    wx = fx if dx == 1 else 1.0 - fx
                    xx = x0 + dx
                    if wx == 0.0 or xx < 0 or xx >= width:
                        continue
                    acc += wy * wx * image[yy, xx]
            out[r, c] = acc
    return out


def _warp_bilinear_np(image, src_x, src_y, out):
    height, width = image.shape
    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = src_x - x0
    fy = src_y - y0
    acc = np.zeros(out.shape, dtype=np.float64)
    for dy in (0, 1):
        wy = fy if dy == 1 else 1.0 - fy
        yy = y0 + dy
        for dx in (0, 1):
            wx = fx if dx == 1 else 1.0 - fx
            xx = x0 + dx
            ok = (wy != 0.0) & (wx != 0.0) & (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
            vals = image[np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
            acc += np.where(ok, wy * wx * vals, 0.0)
    out[...] = acc
    return out


@njit(cache=True)
def _warp_nearest_jit(image, src_x, src_y, out):
    height, width = image.shape
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            xx = int(np.floor(src_x[r, c] + 0.5))
            yy = int(np.floor(src_y[r, c] + 0.5))
            if 0 <= xx < width and 0 <= yy < height:
                out[r, c] = image[yy, xx]
            else:
                out[r, c] = 0
    return out


def _warp_nearest_np(image, src_x, src_y, out):
    height, width = image.shape
    xx = np.floor(src_x + 0.5).astype(np.int64)
    yy = np.floor(src_y + 0.5).astype(np.int64)
    ok = (xx >= 0) & (xx < width) & (yy >= 0) & (yy < height)
    vals = image[np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
    out[...] = np.where(ok, vals, 0)
    return out


if USE_NUMBA:
    _fill, _bilinear, _nearest = _fill_polygons_jit, _warp_bilinear_jit, _warp_nearest_jit
else:
    _fill, _bilinear, _nearest = _fill_polygons_np, _warp_bilinear_np, _warp_nearest_np


def fill_polygons(verts, offsets, labels, shape):
    """Paint packed polygons into a fresh uint8 label grid of ``shape``."""
    out = np.zeros(shape, dtype=np.uint8)
    if len(labels) == 0:
        return out
    return _fill(
        np.ascontiguousarray(verts, dtype=np.int64),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(labels, dtype=np.uint8),
        out,
    )


def warp_bilinear(image, src_x, src_y):
    out = np.empty(src_x.shape, dtype=np.float64)
    return _bilinear(np.ascontiguousarray(image, dtype=np.float64), src_x, src_y, out)


def warp_nearest(image, src_x, src_y):
    image = np.ascontiguousarray(image)
    out = np.empty(src_x.shape, dtype=image.dtype)
    return _nearest(image, src_x, src_y, out)
