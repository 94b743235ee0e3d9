import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vigtext.dct import SpectrumPlane, dct2, dct_visual, dct_visual_f, idct2
from vigtext.raster import RasterImage


def dct2_quadruple_loop(x):
    """Direct evaluation of the DCT-II definition, one sum per coefficient."""
    h, w = len(x), len(x[0])
    out = [[0.0] * w for _ in range(h)]
    for u in range(h):
        au = math.sqrt((1.0 if u == 0 else 2.0) / h)
        for v in range(w):
            av = math.sqrt((1.0 if v == 0 else 2.0) / w)
            acc = 0.0
            for xx in range(h):
                cu = math.cos(math.pi * (2 * xx + 1) * u / (2.0 * h))
                for yy in range(w):
                    cv = math.cos(math.pi * (2 * yy + 1) * v / (2.0 * w))
                    acc += x[xx][yy] * cu * cv
            out[u][v] = au * av * acc
    return np.array(out)


def test_constant_8x8_has_only_dc():
    c = 37.0
    plane = dct2(np.full((8, 8), c))
    assert plane.coeffs[0, 0] == pytest.approx(8.0 * c, abs=1e-9)
    rest = plane.coeffs.copy()
    rest[0, 0] = 0.0
    assert np.max(np.abs(rest)) < 1e-9


def test_unit_dc_inverts_to_quarter_plane():
    coeffs = np.zeros((4, 4))
    coeffs[0, 0] = 1.0
    x = idct2(SpectrumPlane(4, 4, coeffs))
    assert np.max(np.abs(x - 0.25)) < 1e-12


def test_matches_quadruple_loop_4x4():
    rng = np.random.default_rng(11)
    x = rng.uniform(0, 255, size=(4, 4))
    assert np.max(np.abs(dct2(x).coeffs - dct2_quadruple_loop(x.tolist()))) < 1e-9


def test_matches_quadruple_loop_non_square():
    rng = np.random.default_rng(12)
    x = rng.uniform(-100, 100, size=(5, 9))
    assert np.max(np.abs(dct2(x).coeffs - dct2_quadruple_loop(x.tolist()))) < 1e-9


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        dct2(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        dct2(np.zeros(7))


def test_linearity():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(6, 7))
    y = rng.normal(size=(6, 7))
    lhs = dct2(2.5 * x - 1.25 * y).coeffs
    rhs = 2.5 * dct2(x).coeffs - 1.25 * dct2(y).coeffs
    assert np.max(np.abs(lhs - rhs)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**31 - 1))
def test_round_trip_and_parseval(h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-255, 255, size=(h, w))
    plane = dct2(x)
    assert np.max(np.abs(idct2(plane) - x)) < 1e-9
    ssq_x = float(np.sum(x * x))
    ssq_c = float(np.sum(plane.coeffs**2))
    assert ssq_c == pytest.approx(ssq_x, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# frequency visual

def visual_oracle(pix):
    """Independent reimplementation: oracle DCT, log, scale, round half up."""
    h, w, _ = pix.shape
    out = np.zeros((h, w, 3))
    for ch in range(3):
        coeffs = dct2_quadruple_loop(pix[:, :, ch].tolist())
        s = np.log(1.0 + np.abs(coeffs))
        lo, hi = float(s.min()), float(s.max())
        if hi > lo:
            scaled = (s - lo) / (hi - lo) * 255.0
        else:
            scaled = np.zeros_like(s)
        out[:, :, ch] = np.floor(scaled + 0.5)
    return out.astype(np.uint8)


def test_visual_matches_stepwise_oracle():
    rng = np.random.default_rng(14)
    pix = rng.integers(0, 256, size=(6, 5, 3), dtype=np.uint8)
    img = RasterImage.from_array(pix)
    got = dct_visual(img)
    want = visual_oracle(pix.astype(np.float64))
    assert np.array_equal(got.pixels, want)


def test_visual_all_zero_patch():
    img = RasterImage.from_array(np.zeros((4, 4, 3), np.uint8))
    assert np.all(dct_visual(img).pixels == 0)


def test_visual_constant_patch_is_dc_spike():
    img = RasterImage.from_array(np.full((8, 8, 3), 90, np.uint8))
    out = dct_visual(img)
    assert np.all(out.pixels[0, 0] == 255)
    rest = out.pixels.astype(int).copy()
    rest[0, 0] = 0
    assert rest.sum() == 0


def test_visual_f_matches_u8_path():
    rng = np.random.default_rng(15)
    pix = rng.integers(0, 256, size=(7, 7, 3), dtype=np.uint8)
    via_f = dct_visual_f(pix.astype(np.float64))
    via_u8 = dct_visual(RasterImage.from_array(pix)).pixels
    assert np.array_equal(via_f.astype(np.uint8), via_u8)


def test_visual_checkerboard_lights_high_band():
    yy, xx = np.mgrid[0:8, 0:8]
    checker = np.where((xx + yy) % 2 == 0, 200, 55).astype(np.uint8)
    img = RasterImage.from_array(np.stack([checker] * 3, axis=2))
    out = dct_visual(img)
    # the alternating pattern puts the brightest non-DC energy at the corner
    plane = out.pixels[:, :, 0].astype(int)
    assert plane[0, 0] == 255
    plane[0, 0] = -1
    assert plane.argmax() == 7 * 8 + 7
    assert plane[7, 7] > 200
