import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vigtext import raster
from vigtext.errors import (
    MalformedHeaderError,
    MissingImageError,
    TruncatedImageError,
    UnsupportedDepthError,
)
from vigtext.raster import (
    PerturbationSpec,
    RasterImage,
    decode_ppm,
    label_for,
    load_image,
    overlay_grid,
    parse_label,
    parse_spec,
    ppm_bytes,
    save_ppm,
    split_patches,
    transform,
)


def solid(w, h, rgb):
    return RasterImage.from_array(np.tile(np.array(rgb, np.uint8), (h, w, 1)))


def random_image(w, h, seed=0):
    rng = np.random.default_rng(seed)
    return RasterImage.from_array(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------------------
# PPM round trip and error values

def test_ppm_round_trip_bit_exact(tmp_path):
    img = random_image(13, 7, seed=1)
    path = tmp_path / "x.ppm"
    save_ppm(img, path)
    back = load_image(path)
    assert back == img
    assert ppm_bytes(back) == ppm_bytes(img)


def test_ppm_header_comments_and_whitespace():
    img = decode_ppm(b"P6\n# a comment\n2 1\n# another\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    assert (img.width, img.height) == (2, 1)
    assert img.pixels[0, 1].tolist() == [4, 5, 6]


def test_load_errors_are_distinct(tmp_path):
    with pytest.raises(MissingImageError):
        load_image(tmp_path / "absent.ppm")
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"Q9 nonsense")
    with pytest.raises(MalformedHeaderError):
        load_image(bad)
    deep = tmp_path / "deep.ppm"
    deep.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(UnsupportedDepthError):
        load_image(deep)
    short = tmp_path / "short.ppm"
    short.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(TruncatedImageError):
        load_image(short)


def test_png_load(tmp_path):
    from PIL import Image

    arr = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
    path = tmp_path / "x.png"
    Image.fromarray(arr, "RGB").save(path)
    img = load_image(path)
    assert img == RasterImage.from_array(arr)


# ---------------------------------------------------------------------------
# labels

def test_label_scheme():
    assert label_for(0, 0) == "A1"
    assert label_for(1, 2) == "B3"
    assert label_for(3, 0) == "D1"
    assert parse_label("B3") == (1, 2)
    assert parse_label("AA10") == (26, 9)
    assert parse_label("3B") is None
    assert parse_label("B0") is None


@given(st.integers(0, 80), st.integers(0, 80))
def test_label_round_trip(row, col):
    assert parse_label(label_for(row, col)) == (row, col)


# ---------------------------------------------------------------------------
# overlay

def test_overlay_lines_512():
    img = solid(512, 512, (200, 200, 200))
    out = overlay_grid(img, 4)
    for k in (128, 256, 384):
        assert np.all(out.pixels[:, k] == 0)
        assert np.all(out.pixels[k, :] == 0)
    assert (out.width, out.height) == (512, 512)
    assert img.pixels[0, 128].tolist() == [200, 200, 200]  # input untouched


def test_overlay_16x16_white_n2():
    img = solid(16, 16, (255, 255, 255))
    out = overlay_grid(img, 2)
    assert out.pixels[0, 8].tolist() == [0, 0, 0]


def test_overlay_n1_is_unchanged_copy():
    img = solid(64, 64, (90, 90, 90))
    out = overlay_grid(img, 1)
    assert out == img
    assert out.pixels is not img.pixels


def test_overlay_rejects_oversized_grid():
    with pytest.raises(ValueError):
        overlay_grid(solid(4, 4, (0, 0, 0)), 5)


# ---------------------------------------------------------------------------
# splitting

def test_split_exact_grid_and_labels():
    img = random_image(512, 512, seed=2)
    patches = split_patches(img, 4)
    assert len(patches) == 16
    assert patches[6].label == "B3"
    assert (patches[0].image.width, patches[0].image.height) == (128, 128)
    # reassembly reproduces the image exactly
    rows = [
        np.concatenate([patches[r * 4 + c].image.pixels for c in range(4)], axis=1)
        for r in range(4)
    ]
    assert np.array_equal(np.concatenate(rows, axis=0), img.pixels)


def test_split_resizes_to_lower_multiple():
    img = random_image(513, 511, seed=3)
    patches = split_patches(img, 4)
    assert (patches[0].image.width, patches[0].image.height) == (128, 127)
    assert len(patches) == 16


def test_split_patch_count_square():
    for n in (1, 2, 3, 5):
        assert len(split_patches(random_image(40, 40, seed=n), n)) == n * n


# ---------------------------------------------------------------------------
# perturbations

def test_brightness_identity_is_exact():
    img = random_image(31, 17, seed=4)
    out = transform(img, PerturbationSpec.brightness(1.0))
    assert out == img


def test_brightness_round_trip_within_one_level():
    # values away from the clamp range survive f then 1/f within +-1
    rng = np.random.default_rng(5)
    arr = rng.integers(40, 200, size=(9, 9, 3), dtype=np.uint8)
    img = RasterImage.from_array(arr)
    f = 1.2
    out = transform(transform(img, PerturbationSpec.brightness(f)), PerturbationSpec.brightness(1 / f))
    assert np.max(np.abs(out.pixels.astype(int) - arr.astype(int))) <= 1


def test_brightness_clamps():
    img = solid(4, 4, (200, 200, 200))
    out = transform(img, PerturbationSpec.brightness(2.0))
    assert np.all(out.pixels == 255)


def test_blur_constant_image_unchanged():
    img = solid(12, 9, (77, 13, 201))
    out = transform(img, PerturbationSpec.blur(radius=3, sigma=1.5))
    assert out == img


def test_rotate_360_close_to_identity():
    img = random_image(24, 24, seed=6)
    out = transform(img, PerturbationSpec.rotate(360.0))
    diff = np.abs(out.pixels.astype(int) - img.pixels.astype(int))
    assert diff.max() <= 2


def test_rotate_preserves_dimensions():
    img = random_image(30, 20, seed=7)
    out = transform(img, PerturbationSpec.rotate(15.0))
    assert (out.width, out.height) == (30, 20)


def test_scale_translate_fills_black():
    img = solid(40, 40, (250, 250, 250))
    out = transform(img, PerturbationSpec.scale_translate(0.9, 10, 10))
    assert (out.width, out.height) == (40, 40)
    assert np.all(out.pixels[0, 0] == 0)  # content moved away from the origin corner


def test_resize_changes_dimensions():
    img = random_image(50, 30, seed=8)
    out = transform(img, PerturbationSpec.resize(25, 15))
    assert (out.width, out.height) == (25, 15)


def test_resize_constant_stays_constant():
    img = solid(17, 11, (42, 99, 3))
    out = transform(img, PerturbationSpec.resize(29, 13))
    assert np.all(out.pixels == np.array([42, 99, 3], np.uint8))


def test_spec_validation():
    with pytest.raises(ValueError):
        PerturbationSpec("sharpen", {})
    with pytest.raises(ValueError):
        PerturbationSpec("brightness", {"factor": 0.0})
    with pytest.raises(ValueError):
        PerturbationSpec("rotate", {"angle": 15.0})


def test_parse_spec_round_trip():
    spec = parse_spec("scale_translate:scale=0.9,dx=10,dy=10")
    assert spec == PerturbationSpec.scale_translate(0.9, 10, 10)
    assert parse_spec("brightness:factor=1.1").params["factor"] == pytest.approx(1.1)
    with pytest.raises(ValueError):
        parse_spec("warp:x=1")


@settings(max_examples=25, deadline=None)
@given(
    st.integers(2, 6),
    st.integers(10, 48),
    st.integers(10, 48),
    st.integers(0, 2**31 - 1),
)
def test_split_covers_resized_image(n, w, h, seed):
    if w < n or h < n:
        w, h = max(w, n), max(h, n)
    img = random_image(w, h, seed=seed)
    patches = split_patches(img, n)
    assert len(patches) == n * n
    cw = (w - w % n) // n
    ch = (h - h % n) // n
    assert all(p.image.width == cw and p.image.height == ch for p in patches)
    assert [p.label for p in patches] == [
        label_for(r, c) for r in range(n) for c in range(n)
    ]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 2.0))
def test_brightness_monotone(seed, factor):
    img = random_image(8, 8, seed=seed)
    out = transform(img, PerturbationSpec.brightness(factor))
    if factor >= 1.0:
        assert np.all(out.pixels.astype(int) >= img.pixels.astype(int) - 0)
    else:
        assert np.all(out.pixels.astype(int) <= img.pixels.astype(int) + 0)
