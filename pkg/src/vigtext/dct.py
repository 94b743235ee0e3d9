"""Orthonormal 2D DCT-II and the log-scaled frequency visual.

The transform is separable: an H x H basis matrix hits the rows and a
W x W one hits the columns, so dct2 is C_h @ x @ C_w^T. Basis rows are
alpha(k) cos(pi (2x+1) k / 2N) with alpha(0)=sqrt(1/N), alpha(k)=sqrt(2/N),
which makes the matrices orthogonal and Parseval exact.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .raster import CHANNELS, RasterImage


@dataclass
class SpectrumPlane:
    height: int
    width: int
    coeffs: np.ndarray  # (height, width) f64

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.height, self.width):
            raise ValueError(f"coeff shape {self.coeffs.shape} != {self.height}x{self.width}")


@lru_cache(maxsize=64)
def _basis(n: int) -> np.ndarray:
    k = np.arange(n)[:, None].astype(np.float64)
    x = np.arange(n)[None, :].astype(np.float64)
    c = np.cos(np.pi * (2.0 * x + 1.0) * k / (2.0 * n))
    alpha = np.full(n, np.sqrt(2.0 / n))
    alpha[0] = np.sqrt(1.0 / n)
    return alpha[:, None] * c


def dct2(channel: np.ndarray) -> SpectrumPlane:
    a = np.asarray(channel, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"dct2 needs a non-empty 2-D array, got shape {a.shape}")
    h, w = a.shape
    coeffs = _basis(h) @ a @ _basis(w).T
    return SpectrumPlane(height=h, width=w, coeffs=coeffs)


def idct2(plane: SpectrumPlane) -> np.ndarray:
    return _basis(plane.height).T @ plane.coeffs @ _basis(plane.width)


def dct_visual_f(pix_f: np.ndarray) -> np.ndarray:
    """Frequency visual on continuous (h,w,3) pixels, as [0,255] floats.

    Per channel: log1p of the DCT magnitude, min-max scaled to [0,255]
    (a constant log plane maps to all-zero), then quantized to whole
    levels. The attack forward pass calls this directly on float pixels.
    """
    h, w, _ = pix_f.shape
    out = np.empty((h, w, CHANNELS), dtype=np.float64)
    for ch in range(CHANNELS):
        s = np.log1p(np.abs(dct2(pix_f[:, :, ch]).coeffs))
        lo, hi = s.min(), s.max()
        if hi > lo:
            out[:, :, ch] = (s - lo) * (255.0 / (hi - lo))
        else:
            out[:, :, ch] = 0.0
    return np.clip(np.floor(out + 0.5), 0, 255)


def dct_visual(img: RasterImage) -> RasterImage:
    """Per-channel log magnitude spectrum of a patch, as a u8 raster."""
    return RasterImage(
        width=img.width,
        height=img.height,
        pixels=dct_visual_f(img.to_f64()).astype(np.uint8),
    )
