"""Embedding providers for patch images and explanation tokens.

Three interchangeable providers:

* toy: seeded random projection, fully differentiable so the attack
  module can push gradients back to pixels;
* fixture: digest-keyed vectors preloaded from a VGFX1 file;
* remote: HTTP calls against a model server.

A patch node's feature is the average of the spatial embedding and the
embedding of the patch's frequency visual.
"""

import base64
import hashlib
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .dct import dct_visual_f
from .errors import (
    FixtureFormatError,
    FixtureMissError,
    ManifestError,
    ProviderError,
    TransportError,
)
from .raster import Patch, RasterImage, ppm_bytes
from .rng import SplitMix64, seed_from_parts

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])  # Rec.601 luma
TOY_INPUT_SIDE = 16
FIXTURE_MAGIC = b"VGFX1"
DIGEST_LEN = 32


def patch_digest(img: RasterImage) -> bytes:
    """SHA-256 of the canonical P6 bytes; the fixture lookup key."""
    return hashlib.sha256(ppm_bytes(img)).digest()


def token_digest(token: str) -> bytes:
    return hashlib.sha256(token.encode("utf-8")).digest()


class EmbeddingProvider:
    """Deterministic embedders for patches and tokens."""

    kind = "abstract"
    image_dim: int
    text_dim: int

    @property
    def provider_id(self) -> str:
        raise NotImplementedError

    def embed_image(self, img: RasterImage) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, token: str) -> np.ndarray:
        raise NotImplementedError

    def embed_images(self, imgs) -> list:
        return [self.embed_image(im) for im in imgs]

    def embed_texts(self, tokens) -> list:
        return [self.embed_text(t) for t in tokens]

    def node_feature(self, patch: Patch) -> np.ndarray:
        """Average of spatial and frequency-visual embeddings."""
        spatial, frequency = self.embed_images(
            [patch.image, _dct_visual_raster(patch.image)]
        )
        return 0.5 * (spatial + frequency)


def _dct_visual_raster(img: RasterImage) -> RasterImage:
    vis = dct_visual_f(img.to_f64())
    return RasterImage(width=img.width, height=img.height, pixels=vis.astype(np.uint8))


# ---------------------------------------------------------------------------
# toy provider

@lru_cache(maxsize=32)
def _resample_plan(src_h: int, src_w: int, dst_h: int, dst_w: int):
    """Bilinear gather plan (half-pixel centers, edge clamp) as flat arrays."""
    ys, xs = np.mgrid[0:dst_h, 0:dst_w].astype(np.float64)
    sx = np.clip((xs + 0.5) * src_w / dst_w - 0.5, 0.0, src_w - 1.0)
    sy = np.clip((ys + 0.5) * src_h / dst_h - 0.5, 0.0, src_h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, src_w - 1)
    y1 = np.minimum(y0 + 1, src_h - 1)
    fx, fy = sx - x0, sy - y0
    flat = lambda yy, xx: (yy * src_w + xx).ravel()
    idx = np.stack([flat(y0, x0), flat(y0, x1), flat(y1, x0), flat(y1, x1)])
    wts = np.stack(
        [
            ((1 - fx) * (1 - fy)).ravel(),
            (fx * (1 - fy)).ravel(),
            ((1 - fx) * fy).ravel(),
            (fx * fy).ravel(),
        ]
    )
    return idx, wts


def _resample_apply(gray_flat: np.ndarray, plan) -> np.ndarray:
    idx, wts = plan
    return (gray_flat[idx] * wts).sum(axis=0)


def _resample_adjoint(cot: np.ndarray, plan, src_size: int) -> np.ndarray:
    idx, wts = plan
    out = np.zeros(src_size)
    for k in range(4):
        np.add.at(out, idx[k], cot * wts[k])
    return out


@dataclass(eq=False)
class ToyProvider(EmbeddingProvider):
    """tanh of a fixed random projection over a 16x16 grayscale resample.

    The projection matrix is drawn once from splitmix64 with entries
    uniform in [-1, 1) scaled by 1/sqrt(256), so the same seed always
    yields the same embedder.
    """

    seed: int = 0
    image_dim: int = 64
    text_dim: int = 32
    kind = "toy"
    projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n_in = TOY_INPUT_SIDE * TOY_INPUT_SIDE
        gen = SplitMix64(seed_from_parts("toy-image", self.seed))
        self.projection = gen.fill((self.image_dim, n_in), -1.0, 1.0) / np.sqrt(n_in)

    @property
    def provider_id(self) -> str:
        return f"toy:seed={self.seed}:image_dim={self.image_dim}:text_dim={self.text_dim}"

    # -- image side -------------------------------------------------------

    def _preimage(self, pix_f: np.ndarray):
        h, w, _ = pix_f.shape
        plan = _resample_plan(h, w, TOY_INPUT_SIDE, TOY_INPUT_SIDE)
        gray = pix_f @ GRAY_WEIGHTS
        g = _resample_apply(gray.ravel(), plan) / 255.0
        return g, plan

    def embed_pixels(self, pix_f: np.ndarray) -> np.ndarray:
        """Embedding of continuous (h,w,3) pixel values in [0,255]."""
        g, _ = self._preimage(np.asarray(pix_f, dtype=np.float64))
        return np.tanh(self.projection @ g)

    def embed_image(self, img: RasterImage) -> np.ndarray:
        return self.embed_pixels(img.to_f64())

    def jvp_pixels(self, pix_f: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Directional derivative of embed_pixels along pixel direction v."""
        pix_f = np.asarray(pix_f, dtype=np.float64)
        g, plan = self._preimage(pix_f)
        y = np.tanh(self.projection @ g)
        dgray = np.asarray(v, dtype=np.float64) @ GRAY_WEIGHTS
        dg = _resample_apply(dgray.ravel(), plan) / 255.0
        return (1.0 - y * y) * (self.projection @ dg)

    def vjp_pixels(self, pix_f: np.ndarray, cot: np.ndarray) -> np.ndarray:
        """Pull an embedding cotangent back to (h,w,3) pixel space."""
        pix_f = np.asarray(pix_f, dtype=np.float64)
        h, w, _ = pix_f.shape
        g, plan = self._preimage(pix_f)
        y = np.tanh(self.projection @ g)
        du = np.asarray(cot, dtype=np.float64) * (1.0 - y * y)
        dg = self.projection.T @ du
        dgray = _resample_adjoint(dg / 255.0, plan, h * w).reshape(h, w)
        return dgray[:, :, None] * GRAY_WEIGHTS[None, None, :]

    def node_feature_pixels(self, pix_f: np.ndarray) -> np.ndarray:
        """node_feature for continuous pixels (attack forward pass)."""
        pix_f = np.asarray(pix_f, dtype=np.float64)
        return 0.5 * (self.embed_pixels(pix_f) + self.embed_pixels(dct_visual_f(pix_f)))

    def node_feature_vjp(self, pix_f: np.ndarray, cot: np.ndarray) -> np.ndarray:
        """Exact a.e. pixel gradient of node_feature_pixels.

        The frequency branch passes through u8 quantization, which is
        piecewise constant, so its derivative is zero almost everywhere
        and only the spatial branch contributes.
        """
        return 0.5 * self.vjp_pixels(np.asarray(pix_f, dtype=np.float64), cot)

    # -- text side --------------------------------------------------------

    def embed_text(self, token: str) -> np.ndarray:
        folded = token.lower()
        h8 = hashlib.sha256(folded.encode("utf-8")).digest()[:8]
        gen = SplitMix64(self.seed ^ int.from_bytes(h8, "little"))
        return gen.fill((self.text_dim,), -1.0, 1.0)


# ---------------------------------------------------------------------------
# fixture provider

def load_fixture(path):
    """Read a VGFX1 file into (dim, {digest: vector})."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise FixtureFormatError(f"no such fixture: {path}") from exc
    if data[: len(FIXTURE_MAGIC)] != FIXTURE_MAGIC:
        raise FixtureFormatError(f"{path}: bad magic")
    if len(data) < len(FIXTURE_MAGIC) + 4:
        raise FixtureFormatError(f"{path}: truncated header")
    (dim,) = struct.unpack_from("<I", data, len(FIXTURE_MAGIC))
    if dim < 1:
        raise FixtureFormatError(f"{path}: dim must be >= 1")
    body = data[len(FIXTURE_MAGIC) + 4 :]
    rec = DIGEST_LEN + 8 * dim
    if len(body) % rec != 0:
        raise FixtureFormatError(
            f"{path}: body length {len(body)} is not a multiple of record size {rec}"
        )
    table = {}
    for off in range(0, len(body), rec):
        digest = body[off : off + DIGEST_LEN]
        vec = np.frombuffer(body, dtype="<f8", count=dim, offset=off + DIGEST_LEN)
        table[digest] = vec.astype(np.float64)
    return dim, table


def write_fixture(path, dim: int, table: dict) -> None:
    """Write a VGFX1 file; records sorted by digest for determinism."""
    with open(path, "wb") as fh:
        fh.write(FIXTURE_MAGIC)
        fh.write(struct.pack("<I", dim))
        for digest in sorted(table):
            vec = np.asarray(table[digest], dtype=np.float64)
            if vec.shape != (dim,):
                raise FixtureFormatError(f"record has dim {vec.shape}, header says {dim}")
            fh.write(digest)
            fh.write(vec.astype("<f8").tobytes())


def fixture_lookup(table: dict, digest: bytes) -> np.ndarray:
    vec = table.get(digest)
    if vec is None:
        raise FixtureMissError(f"digest {digest.hex()} not in fixture")
    return vec


@dataclass(eq=False)
class FixtureProvider(EmbeddingProvider):
    image_fixture_path: str
    text_fixture_path: str
    kind = "fixture"

    def __post_init__(self):
        self.image_dim, self._image_table = load_fixture(self.image_fixture_path)
        self.text_dim, self._text_table = load_fixture(self.text_fixture_path)
        h = hashlib.sha256()
        for digest in sorted(self._image_table):
            h.update(digest)
        for digest in sorted(self._text_table):
            h.update(digest)
        self._content_id = h.hexdigest()[:16]

    @property
    def provider_id(self) -> str:
        return f"fixture:{self._content_id}"

    def embed_image(self, img: RasterImage) -> np.ndarray:
        return fixture_lookup(self._image_table, patch_digest(img))

    def embed_text(self, token: str) -> np.ndarray:
        return fixture_lookup(self._text_table, token_digest(token))


# ---------------------------------------------------------------------------
# remote provider

@dataclass(eq=False)
class RemoteProvider(EmbeddingProvider):
    """Client for the model server's /embed endpoints.

    Requests are retried up to 3 attempts with exponential backoff, and
    batches are chunked across a small thread pool; results always come
    back in input order.
    """

    endpoint: str
    image_dim: int = 768
    text_dim: int = 768
    max_parallel: int = 4
    chunk_size: int = 16
    retry_base_delay: float = 0.2
    timeout: float = 30.0
    kind = "remote"

    @property
    def provider_id(self) -> str:
        return f"remote:{self.endpoint.rstrip('/')}"

    def _post(self, route: str, payload: dict) -> dict:
        import time

        import requests

        url = self.endpoint.rstrip("/") + route
        last = None
        for attempt in range(1, 4):
            try:
                resp = requests.post(url, json=payload, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return resp.json()
                last = f"HTTP {resp.status_code}"
                if resp.status_code < 500:
                    raise ProviderError(f"{url}: {last}")
            if attempt < 3:
                time.sleep(self.retry_base_delay * (2 ** (attempt - 1)))
        raise TransportError(f"{url}: {last} after 3 attempts", attempts=3)

    def _embed_chunks(self, route: str, key: str, items: list, want_dim: int) -> list:
        chunks = [items[i : i + self.chunk_size] for i in range(0, len(items), self.chunk_size)]
        results = [None] * len(chunks)

        def run(i):
            results[i] = self._post(route, {key: chunks[i]})

        if len(chunks) == 1:
            run(0)
        else:
            with ThreadPoolExecutor(max_workers=self.max_parallel) as pool:
                list(pool.map(run, range(len(chunks))))
        vectors = []
        for got, sent in zip(results, chunks):
            dim = got.get("dim")
            vecs = got.get("vectors")
            if dim != want_dim or vecs is None or len(vecs) != len(sent):
                raise ProviderError(f"{route}: malformed response (dim={dim})")
            for v in vecs:
                arr = np.asarray(v, dtype=np.float64)
                if arr.shape != (want_dim,) or not np.all(np.isfinite(arr)):
                    raise ProviderError(f"{route}: bad vector in response")
                vectors.append(arr)
        return vectors

    def embed_images(self, imgs) -> list:
        payload = [base64.b64encode(ppm_bytes(im)).decode("ascii") for im in imgs]
        return self._embed_chunks("/embed/image", "images", payload, self.image_dim)

    def embed_texts(self, tokens) -> list:
        return self._embed_chunks("/embed/text", "tokens", list(tokens), self.text_dim)

    def embed_image(self, img: RasterImage) -> np.ndarray:
        return self.embed_images([img])[0]

    def embed_text(self, token: str) -> np.ndarray:
        return self.embed_texts([token])[0]

    def parse_sentence(self, sentence: str):
        got = self._post("/parse", {"sentence": sentence})
        tokens = got.get("tokens")
        edges = got.get("edges")
        if not isinstance(tokens, list) or not isinstance(edges, list):
            raise ProviderError("/parse: malformed response")
        return [str(t) for t in tokens], [(int(a), int(b)) for a, b in edges]


# ---------------------------------------------------------------------------
# provider construction

@dataclass
class ProviderConfig:
    kind: str = "toy"
    seed: int = 0
    image_dim: int | None = None
    text_dim: int | None = None
    endpoint: str | None = None
    image_fixture: str | None = None
    text_fixture: str | None = None
    dep_source: str = "chain"  # chain | fixture | remote
    dep_fixture: str | None = None

    def to_json(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed, "dep_source": self.dep_source}
        for key in ("image_dim", "text_dim", "endpoint", "image_fixture", "text_fixture", "dep_fixture"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ProviderConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ManifestError(f"unknown provider config keys: {sorted(extra)}")
        return cls(**obj)


def make_provider(cfg: ProviderConfig) -> EmbeddingProvider:
    if cfg.kind == "toy":
        return ToyProvider(
            seed=cfg.seed,
            image_dim=cfg.image_dim or 64,
            text_dim=cfg.text_dim or 32,
        )
    if cfg.kind == "fixture":
        if not (cfg.image_fixture and cfg.text_fixture):
            raise ProviderError("fixture provider needs image_fixture and text_fixture paths")
        return FixtureProvider(cfg.image_fixture, cfg.text_fixture)
    if cfg.kind == "remote":
        if not cfg.endpoint:
            raise ProviderError("remote provider needs an endpoint")
        return RemoteProvider(
            endpoint=cfg.endpoint,
            image_dim=cfg.image_dim or 768,
            text_dim=cfg.text_dim or 768,
        )
    raise ProviderError(f"unknown provider kind: {cfg.kind}")
