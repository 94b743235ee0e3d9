"""8-bit RGB raster images: loading, grid splitting, and perturbations.

PPM (P6) files are parsed and written by hand so the byte layout stays
exact; PNG decoding is delegated to Pillow. All geometric resampling is
bilinear with half-pixel centers, and float results are re-quantized
with round-half-up.
"""

import math
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    ImageError,
    MalformedHeaderError,
    MissingImageError,
    TruncatedImageError,
    UnsupportedDepthError,
)
from .font5x7 import GLYPH_H, GLYPH_W, GLYPHS

CHANNELS = 3


def quantize_u8(a: np.ndarray) -> np.ndarray:
    """Round half up and clamp to the u8 range."""
    return np.clip(np.floor(np.asarray(a, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


@dataclass
class RasterImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) u8, row-major

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise ImageError("pixels must be u8")
        if self.pixels.shape != (self.height, self.width, CHANNELS):
            raise ImageError(
                f"pixel buffer {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x{CHANNELS}"
            )

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "RasterImage":
        pixels = np.asarray(pixels, dtype=np.uint8)
        h, w, _ = pixels.shape
        return cls(width=w, height=h, pixels=pixels)

    def to_f64(self) -> np.ndarray:
        return self.pixels.astype(np.float64)

    def tobytes(self) -> bytes:
        return self.pixels.tobytes()

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class Patch:
    label: str
    row: int
    col: int
    image: RasterImage


# ---------------------------------------------------------------------------
# grid labels: rows lettered top-down, columns numbered 1..n left-right

def label_for(row: int, col: int) -> str:
    if row < 0 or col < 0:
        raise ValueError("negative grid position")
    letters = ""
    r = row
    while True:
        letters = chr(ord("A") + r % 26) + letters
        r = r // 26 - 1
        if r < 0:
            break
    return f"{letters}{col + 1}"


_LABEL_RE = re.compile(r"^([A-Z]+)([0-9]+)$")


def parse_label(label: str):
    """Return (row, col) for a label like ``B3``, or None if malformed."""
    m = _LABEL_RE.match(label)
    if not m:
        return None
    letters, digits = m.groups()
    row = 0
    for ch in letters:
        row = row * 26 + (ord(ch) - ord("A") + 1)
    col = int(digits)
    if col < 1:
        return None
    return row - 1, col - 1


# ---------------------------------------------------------------------------
# loading and saving

def load_image(path) -> RasterImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise MissingImageError(f"no such image: {path}") from exc
    except IsADirectoryError as exc:
        raise MissingImageError(f"not a file: {path}") from exc
    if data[:2] == b"P6":
        return decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(data, path)
    raise MalformedHeaderError(f"{path}: not a P6 PPM or PNG file")


def decode_ppm(data: bytes) -> RasterImage:
    pos = 2  # past the "P6" magic
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError("truncated PPM header")
        fields.append(data[start:pos])
    if pos >= len(data):
        raise MalformedHeaderError("truncated PPM header")
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric PPM header fields: {fields}") from exc
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedDepthError(f"only maxval 255 supported, got {maxval}")
    expected = width * height * CHANNELS
    raw = data[pos : pos + expected]
    if len(raw) != expected:
        raise TruncatedImageError(f"PPM data: want {expected} bytes, have {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, CHANNELS)
    return RasterImage(width=width, height=height, pixels=pixels.copy())


def _decode_png(data: bytes, path) -> RasterImage:
    import io

    try:
        with Image.open(io.BytesIO(data)) as im:
            if im.mode not in ("RGB", "L", "P", "RGBA"):
                raise UnsupportedDepthError(f"{path}: unsupported PNG mode {im.mode}")
            if "bits" in im.info and im.info["bits"] > 8:
                raise UnsupportedDepthError(f"{path}: PNG depth > 8 bits")
            rgb = im.convert("RGB")
            pixels = np.asarray(rgb, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise MalformedHeaderError(f"{path}: undecodable PNG") from exc
    return RasterImage.from_array(pixels)


def ppm_bytes(img: RasterImage) -> bytes:
    """Canonical P6 serialization; also the digest preimage for patches."""
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.tobytes()


def save_ppm(img: RasterImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(img))


# ---------------------------------------------------------------------------
# grid overlay and patch splitting

def _grid_boundaries(size: int, n: int):
    return [k * size // n for k in range(1, n)]


def _render_label(pixels: np.ndarray, label: str, x0, y0, x1, y1) -> None:
    # white glyphs with a 1px black outline, clipped to the cell rect
    pad = 2
    on = []
    for k, ch in enumerate(label):
        glyph = GLYPHS.get(ch)
        if glyph is None:
            continue
        gx = x0 + pad + k * (GLYPH_W + 1)
        gy = y0 + pad
        for ry, rowbits in enumerate(glyph):
            for rx, bit in enumerate(rowbits):
                if bit == "X":
                    on.append((gx + rx, gy + ry))
    outline = set()
    for x, y in on:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                outline.add((x + dx, y + dy))
    outline.difference_update(on)
    for x, y in outline:
        if x0 <= x < x1 and y0 <= y < y1:
            pixels[y, x] = (0, 0, 0)
    for x, y in on:
        if x0 <= x < x1 and y0 <= y < y1:
            pixels[y, x] = (255, 255, 255)


def overlay_grid(img: RasterImage, n: int) -> RasterImage:
    """Copy of img with n-1 black grid lines per axis and cell labels.

    A 1x1 grid has no boundaries and nothing to disambiguate, so it
    returns an unmarked copy.
    """
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    if n > min(img.width, img.height):
        raise ValueError(f"grid size {n} exceeds image {img.width}x{img.height}")
    if n == 1:
        return RasterImage.from_array(img.pixels.copy())
    pixels = img.pixels.copy()
    for x in _grid_boundaries(img.width, n):
        pixels[:, x] = (0, 0, 0)
    for y in _grid_boundaries(img.height, n):
        pixels[y, :] = (0, 0, 0)
    xs = [0] + _grid_boundaries(img.width, n) + [img.width]
    ys = [0] + _grid_boundaries(img.height, n) + [img.height]
    for row in range(n):
        for col in range(n):
            _render_label(
                pixels, label_for(row, col), xs[col], ys[row], xs[col + 1], ys[row + 1]
            )
    return RasterImage.from_array(pixels)


def split_patches(img: RasterImage, n: int) -> list:
    """Split into an n x n patch list, row-major.

    Dimensions not divisible by n are first shrunk (bilinear) to the
    nearest lower multiple per axis.
    """
    if n < 1:
        raise ValueError(f"grid size must be >= 1, got {n}")
    if img.width < n or img.height < n:
        raise ValueError(f"grid size {n} exceeds image {img.width}x{img.height}")
    w = img.width - img.width % n
    h = img.height - img.height % n
    if (w, h) != (img.width, img.height):
        img = resize(img, w, h)
    cw, ch = w // n, h // n
    patches = []
    for row in range(n):
        for col in range(n):
            tile = img.pixels[row * ch : (row + 1) * ch, col * cw : (col + 1) * cw]
            patches.append(
                Patch(
                    label=label_for(row, col),
                    row=row,
                    col=col,
                    image=RasterImage.from_array(tile.copy()),
                )
            )
    return patches


# ---------------------------------------------------------------------------
# perturbations

_KIND_PARAMS = {
    "resize": ("width", "height"),
    "rotate": ("degrees",),
    "scale_translate": ("scale", "dx", "dy"),
    "blur": ("radius", "sigma"),
    "brightness": ("factor",),
}


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KIND_PARAMS:
            raise ValueError(f"unknown perturbation kind: {self.kind}")
        want = set(_KIND_PARAMS[self.kind])
        have = set(self.params)
        if want != have:
            raise ValueError(f"{self.kind} expects params {sorted(want)}, got {sorted(have)}")
        if self.kind == "brightness" and self.params["factor"] <= 0:
            raise ValueError("brightness factor must be > 0")
        if self.kind == "resize" and (self.params["width"] < 1 or self.params["height"] < 1):
            raise ValueError("resize target must be at least 1x1")
        if self.kind == "blur" and (self.params["radius"] < 0 or self.params["sigma"] <= 0):
            raise ValueError("blur needs radius >= 0 and sigma > 0")
        if self.kind == "scale_translate" and self.params["scale"] <= 0:
            raise ValueError("scale must be > 0")

    @classmethod
    def resize(cls, width: int, height: int):
        return cls("resize", {"width": int(width), "height": int(height)})

    @classmethod
    def rotate(cls, degrees: float = 15.0):
        return cls("rotate", {"degrees": float(degrees)})

    @classmethod
    def scale_translate(cls, scale: float = 0.9, dx: int = 10, dy: int = 10):
        return cls("scale_translate", {"scale": float(scale), "dx": int(dx), "dy": int(dy)})

    @classmethod
    def blur(cls, radius: int = 2, sigma: float = 1.0):
        return cls("blur", {"radius": int(radius), "sigma": float(sigma)})

    @classmethod
    def brightness(cls, factor: float):
        return cls("brightness", {"factor": float(factor)})

    def describe(self) -> str:
        inner = ",".join(f"{k}={self.params[k]:g}" for k in _KIND_PARAMS[self.kind])
        return f"{self.kind}({inner})"


def parse_spec(text: str) -> PerturbationSpec:
    """Parse ``kind:key=value,key=value`` (used by the CLI --spec flag)."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in _KIND_PARAMS:
        raise ValueError(f"unknown perturbation kind: {kind!r}")
    params = {}
    if rest.strip():
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"bad spec fragment {item!r}")
            key = key.strip()
            params[key] = float(value) if "." in value or "e" in value.lower() else int(value)
    for key in ("width", "height", "dx", "dy", "radius"):
        if key in params:
            params[key] = int(params[key])
    for key in ("degrees", "scale", "sigma", "factor"):
        if key in params:
            params[key] = float(params[key])
    return PerturbationSpec(kind, params)


def _sample_bilinear(pix_f: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill=None) -> np.ndarray:
    """Sample (h,w,c) floats at fractional coords; fill=None clamps to edge."""
    h, w = pix_f.shape[:2]
    eps = 1e-9
    if fill is not None:
        inside = (xs >= -0.5 - eps) & (xs <= w - 0.5 + eps) & (ys >= -0.5 - eps) & (ys <= h - 0.5 + eps)
    xc = np.clip(xs, 0.0, w - 1.0)
    yc = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    top = pix_f[y0, x0] * (1 - fx) + pix_f[y0, x1] * fx
    bot = pix_f[y1, x0] * (1 - fx) + pix_f[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    if fill is not None:
        out = np.where(inside[..., None], out, np.asarray(fill, dtype=np.float64))
    return out


def _dst_grid(width: int, height: int):
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs, ys


def resize(img: RasterImage, width: int, height: int) -> RasterImage:
    if width < 1 or height < 1:
        raise ValueError("resize target must be at least 1x1")
    xs, ys = _dst_grid(width, height)
    sx = (xs + 0.5) * img.width / width - 0.5
    sy = (ys + 0.5) * img.height / height - 0.5
    out = _sample_bilinear(img.to_f64(), sx, sy, fill=None)
    return RasterImage(width=width, height=height, pixels=quantize_u8(out))


def rotate(img: RasterImage, degrees: float) -> RasterImage:
    """Rotate about the image center, black fill, dimensions kept."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = (img.width - 1) / 2.0, (img.height - 1) / 2.0
    xs, ys = _dst_grid(img.width, img.height)
    dx, dy = xs - cx, ys - cy
    sx = c * dx + s * dy + cx
    sy = -s * dx + c * dy + cy
    out = _sample_bilinear(img.to_f64(), sx, sy, fill=(0.0, 0.0, 0.0))
    return RasterImage(width=img.width, height=img.height, pixels=quantize_u8(out))


def scale_translate(img: RasterImage, scale: float, dx: int, dy: int) -> RasterImage:
    """Scale about the center, then translate by whole pixels; black fill."""
    cx, cy = (img.width - 1) / 2.0, (img.height - 1) / 2.0
    xs, ys = _dst_grid(img.width, img.height)
    sx = (xs - dx - cx) / scale + cx
    sy = (ys - dy - cy) / scale + cy
    out = _sample_bilinear(img.to_f64(), sx, sy, fill=(0.0, 0.0, 0.0))
    return RasterImage(width=img.width, height=img.height, pixels=quantize_u8(out))


def gaussian_blur(img: RasterImage, radius: int, sigma: float) -> RasterImage:
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    pix = img.to_f64()
    if radius > 0:
        padded = np.pad(pix, ((0, 0), (radius, radius), (0, 0)), mode="edge")
        pix = sum(padded[:, k : k + img.width] * kernel[k] for k in range(2 * radius + 1))
        padded = np.pad(pix, ((radius, radius), (0, 0), (0, 0)), mode="edge")
        pix = sum(padded[k : k + img.height, :] * kernel[k] for k in range(2 * radius + 1))
    return RasterImage(width=img.width, height=img.height, pixels=quantize_u8(pix))


def brightness(img: RasterImage, factor: float) -> RasterImage:
    if factor <= 0:
        raise ValueError("brightness factor must be > 0")
    return RasterImage(
        width=img.width, height=img.height, pixels=quantize_u8(img.to_f64() * factor)
    )


def transform(img: RasterImage, spec: PerturbationSpec) -> RasterImage:
    p = spec.params
    if spec.kind == "resize":
        return resize(img, p["width"], p["height"])
    if spec.kind == "rotate":
        return rotate(img, p["degrees"])
    if spec.kind == "scale_translate":
        return scale_translate(img, p["scale"], p["dx"], p["dy"])
    if spec.kind == "blur":
        return gaussian_blur(img, p["radius"], p["sigma"])
    if spec.kind == "brightness":
        return brightness(img, p["factor"])
    raise ValueError(f"unknown perturbation kind: {spec.kind}")
