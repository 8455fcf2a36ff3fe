import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dfdd.imagecore import (
    Homography,
    Kernel,
    as_image,
    box_filter,
    box_kernel,
    convolve,
    gaussian_filter,
    gaussian_kernel,
    laplacian,
    pixel_grid,
    rescale_to_consensus,
    scaling_homography,
    warp,
)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def images(max_side=24):
    return st.integers(8, max_side).flatmap(
        lambda n: arrays(np.float64, (n, n + 1), elements=finite)
    )


# ----------------------------------------------------------------- kernels

@pytest.mark.parametrize("size", [1, 3, 21])
def test_box_kernel_sums_to_one(size):
    assert abs(box_kernel(size).total() - 1.0) < 1e-9


@pytest.mark.parametrize("std", [0.3, 1.0, 2.5, 11.0])
def test_gaussian_kernel_sums_to_one(std):
    assert abs(gaussian_kernel(std).total() - 1.0) < 1e-9


def test_kernel_rejects_even_taps():
    with pytest.raises(ValueError):
        Kernel(np.ones(4))
    with pytest.raises(ValueError):
        box_kernel(2)


def test_as_image_rejects_nan_and_3d():
    with pytest.raises(ValueError):
        as_image(np.full((4, 4), np.nan))
    with pytest.raises(ValueError):
        as_image(np.zeros((2, 2, 2)))


# ---------------------------------------------------------------- convolve

@pytest.mark.parametrize("k", [box_kernel(5), gaussian_kernel(1.5), Kernel(np.full((3, 3), 1 / 9))])
def test_constant_image_is_preserved(k):
    img = np.full((20, 17), 3.25)
    np.testing.assert_allclose(convolve(img, k), img, rtol=0, atol=1e-12)


def test_delta_reproduces_kernel():
    taps = np.arange(25, dtype=float).reshape(5, 5)
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    out = convolve(img, Kernel(taps))
    np.testing.assert_allclose(out[5:10, 5:10], taps, atol=1e-12)
    assert abs(out.sum() - taps.sum()) < 1e-9


def test_separable_delta_reproduces_outer_product():
    k = gaussian_kernel(1.2)
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    r = k.radius
    np.testing.assert_allclose(convolve(img, k)[10 - r:11 + r, 10 - r:11 + r], k.dense(), atol=1e-15)


@pytest.mark.parametrize("sigma", [0.8, 2.0, 4.0])
def test_gaussian_attenuates_sinusoid_by_its_mtf(sigma):
    f = 1 / 16
    x = np.arange(256)
    img = np.tile(np.sin(2 * np.pi * f * x), (64, 1))
    out = gaussian_filter(img, sigma)
    core = out[:, 64:192]
    amp = np.sqrt(2 * np.mean(core**2))
    expected = np.exp(-2 * np.pi**2 * f**2 * sigma**2)
    assert abs(amp / expected - 1) < 1e-3


def test_kernel_larger_than_image_is_an_error():
    with pytest.raises(ValueError, match="exceeds"):
        convolve(np.zeros((8, 8)), box_kernel(11))


@settings(max_examples=40, deadline=None)
@given(images(), images(), st.floats(-3, 3), st.floats(-3, 3))
def test_convolution_is_linear(a, b, alpha, beta):
    n = min(a.shape[0], b.shape[0])
    a, b = a[:n, :n], b[:n, :n]
    k = gaussian_kernel(0.9)
    lhs = convolve(alpha * a + beta * b, k)
    rhs = alpha * convolve(a, k) + beta * convolve(b, k)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 128), st.sampled_from([1, 3, 5, 7]), st.integers(0, 2**32 - 1))
def test_separable_box_equals_dense_box(n, size, seed):
    img = np.random.default_rng(seed).normal(size=(n, n))
    dense = Kernel(np.full((size, size), 1.0 / size**2))
    np.testing.assert_allclose(box_filter(img, size), convolve(img, dense), rtol=0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(images())
def test_outputs_stay_finite(img):
    assert np.all(np.isfinite(box_filter(img, 3)))
    assert np.all(np.isfinite(laplacian(img)))
    assert np.all(np.isfinite(warp(img, scaling_homography(img.shape, 1.05))[0]))


# --------------------------------------------------------------- laplacian

@pytest.mark.parametrize("stencil", [5, 9])
def test_laplacian_annihilates_affine_images(stencil):
    x, y = pixel_grid((30, 40))
    out = laplacian(3 * x + 2 * y + 1, stencil)
    assert np.abs(out[1:-1, 1:-1]).max() < 1e-12


@pytest.mark.parametrize("stencil", [5, 9])
def test_laplacian_of_paraboloid_is_four(stencil):
    x, y = pixel_grid((30, 40))
    out = laplacian(x**2 + y**2, stencil)
    np.testing.assert_allclose(out[1:-1, 1:-1], 4.0, atol=1e-9)


def _blob_error(s, stencil=5):
    n = int(12 * s) | 1
    x, y = pixel_grid((n, n))
    r2 = (x - n // 2) ** 2 + (y - n // 2) ** 2
    g = np.exp(-r2 / (2 * s**2))
    analytic = (r2 / s**4 - 2 / s**2) * g
    return np.abs(laplacian(g, stencil) - analytic)[1:-1, 1:-1].max() / np.abs(analytic).max()


@pytest.mark.parametrize("s", [3.0, 5.0, 10.0, 20.0])
def test_laplacian_of_gaussian_blob_converges_at_second_order(s):
    # truncation error of the five-point stencil is (h^2/12) * (f_xxxx + f_yyyy),
    # about 0.25 / s^2 of the peak for a Gaussian blob
    err = _blob_error(s)
    assert err < 0.26 / s**2
    assert err > 0.2 / s**2


def test_laplacian_of_wide_gaussian_blob_within_1e3():
    assert _blob_error(20.0) < 1e-3
    assert _blob_error(20.0, stencil=9) < 1e-3


def test_laplacian_pitch_scaling():
    x, y = pixel_grid((10, 10))
    np.testing.assert_allclose(laplacian(x**2, pitch=0.5)[1:-1, 1:-1], 8.0)


def test_laplacian_needs_three_pixels():
    with pytest.raises(ValueError):
        laplacian(np.zeros((2, 5)))


# -------------------------------------------------------------- homography

def test_homography_normalizes_and_inverts():
    h = Homography(2 * np.array([[1.1, 0.1, 3], [0.0, 0.9, -2], [0, 0, 1]]))
    assert h.m[2, 2] == 1.0
    x, y = h.apply(np.array([3.0]), np.array([4.0]))
    xb, yb = h.inverse().apply(x, y)
    np.testing.assert_allclose([xb[0], yb[0]], [3.0, 4.0], atol=1e-12)


def test_singular_homography_is_rejected():
    with pytest.raises(ValueError):
        Homography(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), np.array([[1, 2, 0], [2, 4, 0], [0, 0, 1]]))


def test_scaling_homography_matches_rescaling_rule():
    h = scaling_homography((101, 101), 1.02)
    x, y = h.apply(np.array([60.0]), np.array([50.0]))
    assert abs(x[0] - (50 + 1.02 * 10)) < 1e-12 and abs(y[0] - 50) < 1e-12


# -------------------------------------------------------------------- warp

def test_identity_warp_is_bitwise_identity():
    img = np.random.default_rng(0).normal(size=(19, 23))
    out, mask = warp(img, Homography.identity())
    assert np.array_equal(out, img)
    assert mask.all()


def test_integer_translation_shifts_and_masks_border():
    img = np.random.default_rng(1).normal(size=(20, 30))
    out, mask = warp(img, Homography.from_affine(np.eye(2), [3, -2]))
    # out(x, y) = img(x + 3, y - 2)
    np.testing.assert_array_equal(out[2:, :-3], img[:-2, 3:])
    assert not mask[:2, :].any() and not mask[:, -3:].any()
    assert mask[2:, :-3].all()
    assert np.all(out[~mask] == 0)


def test_scale_round_trip_on_smooth_image():
    x, y = pixel_grid((128, 128))
    img = np.sin(2 * np.pi * x / 96) * np.cos(2 * np.pi * y / 128)
    up, m1 = warp(img, scaling_homography(img.shape, 1.01))
    back, m2 = warp(up, scaling_homography(img.shape, 1 / 1.01))
    keep = m1 & m2
    keep[:3], keep[-3:], keep[:, :3], keep[:, -3:] = False, False, False, False
    assert np.sqrt(np.mean((back - img)[keep] ** 2)) < 1e-3


def test_edge_fill_replicates_instead_of_zeroing():
    img = np.full((10, 10), 2.0)
    out, mask = warp(img, Homography.from_affine(np.eye(2), [4, 0]), fill="edge")
    assert not mask.all()
    assert np.all(out == 2.0)


def test_unknown_warp_options_rejected():
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), Homography.identity(), interp="cubic")
    with pytest.raises(ValueError):
        warp(np.zeros((4, 4)), Homography.identity(), fill="mirror")


# --------------------------------------------------------------- rescaling

def test_rescale_with_unit_ratio_is_identity():
    img = np.random.default_rng(2).normal(size=(16, 16))
    out, mask = rescale_to_consensus(img, 0.03, 0.03)
    assert np.array_equal(out, img) and mask.all()


def test_rescale_by_two_moves_delta_halfway_to_centre():
    img = np.zeros((161, 161))
    img[80 + 40, 80 + 40] = 1.0
    out, _ = rescale_to_consensus(img, 2.0, 1.0)
    assert np.unravel_index(np.argmax(out), out.shape) == (100, 100)
    assert out[100, 100] == 1.0


def test_rescale_rejects_non_positive_distances():
    with pytest.raises(ValueError):
        rescale_to_consensus(np.zeros((4, 4)), 0.0, 1.0)
    with pytest.raises(ValueError):
        rescale_to_consensus(np.zeros((4, 4)), 1.0, -1.0)
