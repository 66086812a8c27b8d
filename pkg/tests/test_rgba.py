import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerflow import rgba

unit = st.floats(0.0, 1.0, allow_nan=False, width=32)
pixels = arrays(np.float32, (3, 3, 4), elements=unit)


def px(*v):
    return np.array(v, dtype=np.float32).reshape(1, 1, 4)


def over_oracle(f, b):
    """Porter-Duff over written out per pixel, straight alpha, float64."""
    f = f.astype(np.float64)
    b = b.astype(np.float64)
    out = np.zeros_like(f)
    for idx in np.ndindex(f.shape[:2]):
        af, ab = f[idx][3], b[idx][3]
        ao = af + ab * (1 - af)
        out[idx][3] = ao
        if ao > 0:
            out[idx][:3] = (af * f[idx][:3] + (1 - af) * ab * b[idx][:3]) / ao
    return out


def test_over_hand_example():
    out = rgba.over(px(1, 1, 1, 0.5), px(0, 0, 0, 1))
    np.testing.assert_allclose(out[0, 0], [0.5, 0.5, 0.5, 1.0], atol=1e-7)


def test_flatten_hand_example():
    out = rgba.flatten([px(0, 0, 0, 1), px(1, 1, 1, 0.5), px(1, 0, 0, 0.5)])
    np.testing.assert_allclose(out[0, 0], [0.75, 0.25, 0.25, 1.0], atol=1e-7)


def test_matte_hand_example():
    out = rgba.composite_on_matte(px(1, 0, 0, 0.25), (0, 0, 1))
    np.testing.assert_allclose(out[0, 0], [0.25, 0, 0.75, 1], atol=1e-7)


def test_over_shape_error_names_both():
    with pytest.raises(rgba.ShapeError, match=r"\(2, 2, 4\).*\(3, 3, 4\)"):
        rgba.over(np.zeros((2, 2, 4)), np.zeros((3, 3, 4)))


def test_flatten_empty_and_single():
    with pytest.raises(ValueError):
        rgba.flatten([])
    x = np.random.default_rng(0).random((4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(rgba.flatten([x]), x)


@given(pixels, pixels)
def test_over_matches_oracle(f, b):
    np.testing.assert_allclose(rgba.over(f, b), over_oracle(f, b), atol=1e-6)


@given(pixels, pixels)
def test_opaque_and_transparent_sources(f, b):
    f1 = f.copy()
    f1[..., 3] = 1
    np.testing.assert_array_equal(rgba.over(f1, b), f1)
    f0 = f.copy()
    f0[..., 3] = 0
    b_clean = b.copy()
    b_clean[b_clean[..., 3] == 0, :3] = 0  # zero-alpha color is canonicalized
    np.testing.assert_allclose(rgba.over(f0, b), b_clean, atol=1e-7)


@given(pixels, pixels, pixels)
def test_over_associative(a, b, c):
    left = rgba.over(rgba.over(a, b), c)
    right = rgba.over(a, rgba.over(b, c))
    np.testing.assert_allclose(left, right, atol=1e-6)


@given(pixels, pixels, arrays(np.float32, (3, 3, 3), elements=unit))
def test_zero_alpha_source_color_is_ignored(f, b, junk):
    f = f.copy()
    f[..., 3] = np.where(f[..., 3] < 0.5, 0, f[..., 3])
    g = f.copy()
    g[..., :3] = np.where(f[..., 3:] == 0, junk, f[..., :3])
    np.testing.assert_array_equal(rgba.over(f, b), rgba.over(g, b))


@given(pixels, st.tuples(unit, unit, unit))
def test_matte_affine_and_in_range(img, m):
    out = rgba.composite_on_matte(img, m)
    a = img[..., 3:].astype(np.float64)
    want = a * img[..., :3] + (1 - a) * np.asarray(m, dtype=np.float64)
    np.testing.assert_allclose(out[..., :3], want, atol=1e-6)
    assert np.all(out[..., 3] == 1)
    assert out.min() >= 0 and out.max() <= 1


def test_opaque_bottom_gives_opaque_result(rng):
    stack = [rng.random((8, 8, 4)).astype(np.float32) for _ in range(4)]
    stack[0][..., 3] = 1
    assert np.all(rgba.flatten(stack)[..., 3] == 1)


def test_checkerboard_pattern():
    cb = rgba.checkerboard_preview(rgba.blank(2, 2), cell=1)
    assert cb[0, 0, 0] == pytest.approx(0.8) and cb[0, 1, 0] == pytest.approx(0.6)
    assert cb[1, 0, 0] == pytest.approx(0.6) and cb[1, 1, 0] == pytest.approx(0.8)
    opaque = np.full((4, 4, 4), 0.3, dtype=np.float32)
    opaque[..., 3] = 1
    np.testing.assert_allclose(rgba.checkerboard_preview(opaque), opaque, atol=1e-7)


def test_grid_layout(rng):
    q = [rng.random((16, 16, 4)).astype(np.float32) for _ in range(4)]
    g = rgba.assemble_grid(*q)
    assert g.grid.shape == (32, 32, 4)
    assert g.quadrants == rgba.QUADRANT_ROLES
    np.testing.assert_array_equal(g.grid[:16, :16], q[0])
    np.testing.assert_array_equal(g.grid[:16, 16:], q[1])
    np.testing.assert_array_equal(g.grid[16:, :16], q[2])
    np.testing.assert_array_equal(g.grid[16:, 16:], q[3])
    for a, b in zip(rgba.split_grid(g.grid), q):
        np.testing.assert_array_equal(a, b)


def test_grid_errors():
    with pytest.raises(rgba.ShapeError):
        rgba.split_grid(np.zeros((5, 6, 4)))
    with pytest.raises(rgba.ShapeError):
        rgba.assemble_grid(*(np.zeros((4, 4, 4)),) * 3, np.zeros((2, 2, 4)))


def test_png_roundtrip_quantization(tmp_path, rng):
    img = rng.random((8, 8, 4)).astype(np.float32)
    rgba.write_png(img, tmp_path / "x.png")
    back = rgba.read_png(tmp_path / "x.png")
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6
    q = rgba.quantize(np.full((1, 1, 4), 0.5, dtype=np.float32))
    assert q[0, 0, 0] == 128  # 127.5 rounds up


def test_alpha_bbox():
    img = rgba.blank(10, 10)
    img[2:5, 3:9, 3] = 1
    assert rgba.alpha_bbox(img) == (3, 2, 6, 3)
    assert rgba.alpha_bbox(rgba.blank(4, 4)) == (0, 0, 0, 0)
