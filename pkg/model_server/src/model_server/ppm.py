"""Binary PPM (P6) parsing and serialization.

The wire format for images is base64-wrapped P6 with maxval 255. The
canonical serialization (single newline separators, no comments) is
also the preimage of the digest that keys embedding fixtures, so
`serialize` must stay byte-stable.
"""

import hashlib

import numpy as np


class PpmError(ValueError):
    pass


def parse(data: bytes) -> np.ndarray:
    """Parse P6 bytes into an (h, w, 3) uint8 array.

    Accepts the general P6 header (any whitespace run between fields,
    '#' comments) but requires maxval 255.
    """
    if not data.startswith(b"P6"):
        raise PpmError("not a P6 image")
    pos = 2
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
            raise PpmError("truncated header")
        fields.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmError("missing pixel data separator")
    pos += 1  # exactly one whitespace byte before raster data
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise PpmError(f"non-numeric header field: {exc}") from exc
    if width < 1 or height < 1:
        raise PpmError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise PpmError(f"unsupported maxval {maxval}")
    need = width * height * 3
    body = data[pos : pos + need]
    if len(body) != need:
        raise PpmError(f"expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def serialize(pixels: np.ndarray) -> bytes:
    """Canonical P6 bytes for an (h, w, 3) uint8 array."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PpmError(f"expected (h, w, 3) uint8 pixels, got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def digest(pixels: np.ndarray) -> bytes:
    """SHA-256 of the canonical serialization; the fixture lookup key."""
    return hashlib.sha256(serialize(pixels)).digest()
