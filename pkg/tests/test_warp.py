import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.ndimage import gaussian_filter

from aetlab import xform
from aetlab.errors import InputError, ShapeError
from aetlab.warp import ImageTensor, bilinear_sample, pixel_grid, warp_batch, warp_image


def blurred_images(rng, n=4, size=32, sigma=2.0):
    raw = gaussian_filter(rng.random((n, 1, size, size)), sigma=(0, 0, sigma, sigma))
    lo = raw.min(axis=(1, 2, 3), keepdims=True)
    hi = raw.max(axis=(1, 2, 3), keepdims=True)
    return (raw - lo) / (hi - lo)


def bilinear_oracle(img, x, y):
    """Direct formula on a single channel at pixel-index coordinates (x, y)."""
    h, w = img.shape

    def px(i, j):
        return img[j, i] if 0 <= i < w and 0 <= j < h else 0.0

    x0, y0 = int(np.floor(x)), int(np.floor(y))
    a, b = x - x0, y - y0
    return ((1 - a) * (1 - b) * px(x0, y0) + a * (1 - b) * px(x0 + 1, y0)
            + (1 - a) * b * px(x0, y0 + 1) + a * b * px(x0 + 1, y0 + 1))


def test_pixel_grid_centers():
    g = pixel_grid(2, 4)
    np.testing.assert_allclose(g[:4, 0], [-0.75, -0.25, 0.25, 0.75])
    np.testing.assert_allclose(g[::4, 1], [-0.5, 0.5])


def test_identity_warp_exact():
    imgs = blurred_images(np.random.default_rng(0))
    out = warp_image(ImageTensor(imgs), xform.Homography.eye())
    np.testing.assert_array_equal(out.data, imgs)


@pytest.mark.parametrize("dx, dy", [(1, 0), (0, 1), (-1, 0), (2, -3)])
def test_whole_pixel_translation_matches_index_shift(dx, dy):
    size = 32
    imgs = blurred_images(np.random.default_rng(1), n=2, size=size)
    h = xform.translation(2.0 * dx / size, 2.0 * dy / size)
    out = warp_image(ImageTensor(imgs), h).data
    expect = np.zeros_like(imgs)
    ys = slice(max(dy, 0), size + min(dy, 0))
    xs = slice(max(dx, 0), size + min(dx, 0))
    ys_src = slice(max(-dy, 0), size + min(-dy, 0))
    xs_src = slice(max(-dx, 0), size + min(-dx, 0))
    expect[..., ys, xs] = imgs[..., ys_src, xs_src]
    np.testing.assert_array_equal(out, expect)


def test_rot90_is_exact_array_rotation():
    imgs = blurred_images(np.random.default_rng(2), n=1)
    out = warp_image(ImageTensor(imgs), xform.rotation(90)).data
    # with y pointing down a +90 degree turn maps +x onto +y
    np.testing.assert_array_equal(out[0, 0], np.rot90(imgs[0, 0], k=-1))


def test_roundtrip_interior_mae():
    rng = np.random.default_rng(3)
    imgs = blurred_images(rng, n=8)
    maes = []
    for img in imgs:
        t = xform.sample_affine(rng, xform.AffineSpec(trans_range=(-0.05, 0.05), scale_range=(0.9, 1.1),
                                                      shear_range=(-10, 10)))
        back = warp_image(warp_image(ImageTensor(img[None]), t.H), xform.invert(t.H)).data
        maes.append(np.abs(back[0, 0, 10:22, 10:22] - img[0, 10:22, 10:22]).mean())
    assert max(maes) < 0.02


def test_bilinear_matches_direct_formula():
    rng = np.random.default_rng(4)
    img = rng.random((1, 5, 7))
    pts = rng.uniform(-1.3, 1.3, size=(300, 2))
    got = bilinear_sample(img, pts)[0]
    u = (pts[:, 0] + 1) * 7 / 2 - 0.5
    v = (pts[:, 1] + 1) * 5 / 2 - 0.5
    expect = [bilinear_oracle(img[0], a, b) for a, b in zip(u, v)]
    np.testing.assert_allclose(got, expect, atol=1e-14)


def test_far_outside_is_zero():
    img = np.ones((2, 4, 4))
    np.testing.assert_array_equal(bilinear_sample(img, [[5.0, 5.0], [-3.0, 0.0]]), 0.0)


def test_nan_coordinates_rejected():
    with pytest.raises(InputError):
        bilinear_sample(np.ones((1, 4, 4)), [[np.nan, 0.0]])


def test_bad_shapes_rejected():
    with pytest.raises(ShapeError):
        ImageTensor(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        bilinear_sample(np.ones((1, 4, 4)), np.zeros((3, 3)))


def test_declared_range_enforced():
    with pytest.raises(InputError):
        ImageTensor(np.full((1, 1, 2, 2), 2.0))


def test_batch_uses_per_item_matrices():
    imgs = blurred_images(np.random.default_rng(5), n=2)
    mats = [xform.rotation(90).m, np.eye(3)]
    out = warp_batch(imgs, mats)
    np.testing.assert_array_equal(out[1], imgs[1])
    np.testing.assert_array_equal(out[0], warp_image(ImageTensor(imgs[:1]), xform.rotation(90)).data[0])


def test_output_size_override():
    out = warp_batch(np.ones((1, 1, 8, 8)), [np.eye(3)], out_hw=(4, 4))
    assert out.shape == (1, 1, 4, 4)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(0.0, 1.0), rot=st.sampled_from([0, 90, 180, 270]))
def test_constant_image_interior_preserved(c, rot):
    img = np.full((1, 1, 16, 16), c)
    out = warp_image(ImageTensor(img), xform.rotation(rot)).data
    np.testing.assert_allclose(out, c, atol=1e-12)
    assert out.max() <= 1.0
