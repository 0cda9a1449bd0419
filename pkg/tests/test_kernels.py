import numpy as np
import pytest

from zonebench import kernels
from zonebench._accel import numba

from oracles import random_polygons

pytestmark = pytest.mark.skipif(numba is None, reason="numba not installed")


def packed(polys):
    verts = np.concatenate([np.asarray(v, dtype=np.int64) for _, v in polys])
    offsets = np.cumsum([0] + [len(v) for _, v in polys]).astype(np.int64)
    labels = np.array([lab for lab, _ in polys], dtype=np.uint8)
    return verts, offsets, labels


@pytest.mark.parametrize("seed", range(10))
def test_fill_paths_agree(seed):
    polys = random_polygons(np.random.default_rng(seed))
    v, o, lab = packed(polys)
    a = kernels._fill_polygons_jit(v, o, lab, np.zeros((256, 256), np.uint8))
    b = kernels._fill_polygons_np(v, o, lab, np.zeros((256, 256), np.uint8))
    np.testing.assert_array_equal(a, b)


def test_warp_paths_agree(rng):
    image = rng.random((64, 64))
    mask = rng.integers(0, 5, (64, 64)).astype(np.uint8)
    ys, xs = np.mgrid[0:64, 0:64].astype(np.float64)
    theta = 0.3
    src_x = np.cos(theta) * (xs - 31.5) - np.sin(theta) * (ys - 31.5) + 31.5 + 2.25
    src_y = np.sin(theta) * (xs - 31.5) + np.cos(theta) * (ys - 31.5) + 31.5
    out = np.empty((64, 64))
    np.testing.assert_allclose(
        kernels._warp_bilinear_jit(image, src_x, src_y, out.copy()),
        kernels._warp_bilinear_np(image, src_x, src_y, out.copy()),
        rtol=0,
        atol=1e-12,
    )
    m = np.empty((64, 64), np.uint8)
    np.testing.assert_array_equal(
        kernels._warp_nearest_jit(mask, src_x, src_y, m.copy()),
        kernels._warp_nearest_np(mask, src_x, src_y, m.copy()),
    )


def test_bilinear_midpoint():
    image = np.array([[0.0, 1.0], [2.0, 3.0]])
    x = np.array([[0.5]])
    y = np.array([[0.5]])
    assert kernels.warp_bilinear(image, x, y)[0, 0] == pytest.approx(1.5)


def test_out_of_frame_reads_are_zero():
    image = np.ones((4, 4))
    x = np.full((1, 1), -3.0)
    assert kernels.warp_bilinear(image, x, x)[0, 0] == 0.0
    assert kernels.warp_nearest(image.astype(np.uint8), x, x)[0, 0] == 0
