import numpy as np
import pytest

from msdet.nn import kernels
from msdet.nn import kernels_numpy


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# conv2d
# ---------------------------------------------------------------------------

def test_conv_scalar_multiply_add():
    x = np.full((1, 1, 1, 1), 2.0, np.float32)
    w = np.full((1, 1, 1, 1), 3.0, np.float32)
    b = np.array([1.0], np.float32)
    y = kernels.conv2d_forward(x, w, b, 1, 0)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 7.0


def test_conv_zero_kernel_gives_bias():
    x = rng().normal(size=(2, 3, 5, 6)).astype(np.float32)
    w = np.zeros((4, 3, 3, 3), np.float32)
    b = np.array([0.5, -1.0, 2.0, 0.0], np.float32)
    y = kernels.conv2d_forward(x, w, b, 1, 1)
    for oc in range(4):
        assert np.all(y[:, oc] == b[oc])


def test_conv_sum_of_nine_ones():
    x = np.ones((1, 1, 3, 3), np.float32)
    w = np.ones((1, 1, 3, 3), np.float32)
    b = np.zeros(1, np.float32)
    y = kernels.conv2d_forward(x, w, b, 1, 0)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 9.0


def test_conv_output_shape_formula():
    for h, w, k, stride, pad in [(7, 9, 3, 1, 0), (8, 8, 3, 2, 1), (5, 5, 1, 1, 0)]:
        x = rng(1).normal(size=(1, 2, h, w)).astype(np.float32)
        wt = rng(2).normal(size=(3, 2, k, k)).astype(np.float32)
        y = kernels.conv2d_forward(x, wt, np.zeros(3, np.float32), stride, pad)
        ho = (h + 2 * pad - k) // stride + 1
        wo = (w + 2 * pad - k) // stride + 1
        assert y.shape == (1, 3, ho, wo)


def test_conv_matches_numpy_reference_backend():
    # cross-validate the active backend against the pure-numpy reference
    r = rng(3)
    x = r.normal(size=(2, 4, 9, 11)).astype(np.float32)
    w = r.normal(size=(5, 4, 3, 3)).astype(np.float32)
    b = r.normal(size=5).astype(np.float32)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        ya = kernels.conv2d_forward(x, w, b, stride, pad)
        yr = kernels_numpy.conv2d_forward(x, w, b, stride, pad)
        np.testing.assert_allclose(ya, yr, rtol=2e-5, atol=2e-5)
        gy = r.normal(size=ya.shape).astype(np.float32)
        ga = kernels.conv2d_backward(x, w, stride, pad, gy)
        gr = kernels_numpy.conv2d_backward(x, w, stride, pad, gy)
        for a, ref in zip(ga, gr):
            np.testing.assert_allclose(a, ref, rtol=2e-4, atol=2e-5)


def test_conv_deterministic_bit_identical():
    r = rng(4)
    x = r.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = r.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = r.normal(size=4).astype(np.float32)
    y1 = kernels.conv2d_forward(x, w, b, 1, 1)
    y2 = kernels.conv2d_forward(x, w, b, 1, 1)
    assert np.array_equal(y1, y2)


# ---------------------------------------------------------------------------
# maxpool 2x2
# ---------------------------------------------------------------------------

def test_maxpool_basic():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2)
    y, arg = kernels.maxpool2_forward(x)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 4.0
    assert arg[0, 0, 0, 0] == 3  # row 1, col 1 of a 2-wide plane


def test_maxpool_drops_odd_trailing():
    x = rng(5).normal(size=(1, 2, 5, 7)).astype(np.float32)
    y, _ = kernels.maxpool2_forward(x)
    assert y.shape == (1, 2, 2, 3)
    yr, _ = kernels_numpy.maxpool2_forward(x)
    np.testing.assert_array_equal(y, yr)


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 1, 2, 2)
    _, arg = kernels.maxpool2_forward(x)
    gy = np.full((1, 1, 1, 1), 5.0, np.float32)
    gx = kernels.maxpool2_backward(arg, gy, 2, 2)
    np.testing.assert_array_equal(
        gx, np.array([[0.0, 0.0], [0.0, 5.0]], np.float32).reshape(1, 1, 2, 2)
    )


def test_maxpool_backend_parity():
    x = rng(6).normal(size=(2, 3, 6, 8)).astype(np.float32)
    ya, aa = kernels.maxpool2_forward(x)
    yr, ar = kernels_numpy.maxpool2_forward(x)
    np.testing.assert_array_equal(ya, yr)
    np.testing.assert_array_equal(aa, ar)


# ---------------------------------------------------------------------------
# roi max pooling vs a brute-force binning oracle
# ---------------------------------------------------------------------------

def oracle_roi_pool(feat, region, out_h, out_w):
    """Independent re-derivation of the bin rule: row bin i of an H-cell
    region spans [floor(i*H/out_h), ceil((i+1)*H/out_h))."""
    import math

    x1, y1, x2, y2 = (int(v) for v in region)
    rh = y2 - y1 + 1
    rw = x2 - x1 + 1
    c = feat.shape[0]
    out = np.empty((c, out_h, out_w), feat.dtype)
    for i in range(out_h):
        hs = y1 + math.floor(i * rh / out_h)
        he = y1 + math.ceil((i + 1) * rh / out_h)
        for j in range(out_w):
            ws = x1 + math.floor(j * rw / out_w)
            we = x1 + math.ceil((j + 1) * rw / out_w)
            for ic in range(c):
                out[ic, i, j] = feat[ic, hs:he, ws:we].max()
    return out


def test_roi_pool_whole_map_1x1_is_global_max():
    feat = rng(7).normal(size=(3, 6, 6)).astype(np.float32)
    regions = np.array([[0, 0, 5, 5]], np.int64)
    y, _ = kernels.roi_max_pool_forward(feat, regions, 1, 1)
    np.testing.assert_array_equal(y[0, :, 0, 0], feat.reshape(3, -1).max(axis=1))


def test_roi_pool_2x2_identity():
    feat = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32).reshape(1, 2, 2)
    regions = np.array([[0, 0, 1, 1]], np.int64)
    y, _ = kernels.roi_max_pool_forward(feat, regions, 2, 2)
    np.testing.assert_array_equal(y[0, 0], feat[0])


def test_roi_pool_4x4_distinct_values():
    feat = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    regions = np.array([[0, 0, 3, 3]], np.int64)
    y, _ = kernels.roi_max_pool_forward(feat, regions, 2, 2)
    np.testing.assert_array_equal(y[0, 0], np.array([[5.0, 7.0], [13.0, 15.0]]))
    oracle = oracle_roi_pool(feat, (0, 0, 3, 3), 2, 2)
    np.testing.assert_array_equal(y[0], oracle)


def test_roi_pool_all_regions_of_6x6_grid_match_oracle():
    feat = rng(8).normal(size=(2, 6, 6)).astype(np.float32)
    for out_h, out_w in [(1, 1), (2, 2), (3, 2), (7, 7)]:
        for x1 in range(6):
            for x2 in range(x1, 6):
                for y1 in range(6):
                    for y2 in range(y1, 6):
                        region = np.array([[x1, y1, x2, y2]], np.int64)
                        y, _ = kernels.roi_max_pool_forward(feat, region, out_h, out_w)
                        ref = oracle_roi_pool(feat, (x1, y1, x2, y2), out_h, out_w)
                        np.testing.assert_array_equal(y[0], ref)


def test_roi_pool_backward_scatters_to_argmax():
    feat = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    regions = np.array([[0, 0, 3, 3]], np.int64)
    _, arg = kernels.roi_max_pool_forward(feat, regions, 2, 2)
    gy = np.ones((1, 1, 2, 2), np.float32)
    gf = kernels.roi_max_pool_backward(arg, gy, 1, 4, 4)
    expected = np.zeros((1, 4, 4), np.float32)
    for flat in (5, 7, 13, 15):
        expected[0, flat // 4, flat % 4] = 1.0
    np.testing.assert_array_equal(gf, expected)


def test_roi_pool_backend_parity():
    feat = rng(9).normal(size=(3, 8, 10)).astype(np.float32)
    regions = np.array([[0, 0, 9, 7], [2, 3, 5, 6], [1, 1, 1, 1]], np.int64)
    ya, aa = kernels.roi_max_pool_forward(feat, regions, 7, 7)
    yr, ar = kernels_numpy.roi_max_pool_forward(feat, regions, 7, 7)
    np.testing.assert_array_equal(ya, yr)
    np.testing.assert_array_equal(aa, ar)
    gy = rng(10).normal(size=ya.shape).astype(np.float32)
    np.testing.assert_allclose(
        kernels.roi_max_pool_backward(aa, gy, 3, 8, 10),
        kernels_numpy.roi_max_pool_backward(ar, gy, 3, 8, 10),
        rtol=1e-6,
    )
