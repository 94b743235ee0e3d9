import hashlib
import http.server
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vigtext.dct import dct_visual
from vigtext.embed import (
    GRAY_WEIGHTS,
    TOY_INPUT_SIDE,
    FixtureProvider,
    ProviderConfig,
    RemoteProvider,
    ToyProvider,
    fixture_lookup,
    load_fixture,
    make_provider,
    patch_digest,
    token_digest,
    write_fixture,
)
from vigtext.errors import (
    FixtureFormatError,
    FixtureMissError,
    ProviderError,
    TransportError,
)
from vigtext.raster import Patch, RasterImage, ppm_bytes
from vigtext.rng import SplitMix64


def random_image(w, h, seed=0):
    rng = np.random.default_rng(seed)
    return RasterImage.from_array(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def as_patch(img, label="A1"):
    return Patch(label=label, row=0, col=0, image=img)


# ---------------------------------------------------------------------------
# toy image embedder

def oracle_toy_embed(img, provider):
    """Grayscale -> 16x16 bilinear -> [0,1] -> projection, written plainly."""
    pix = img.to_f64()
    gray = (
        pix[:, :, 0] * GRAY_WEIGHTS[0]
        + pix[:, :, 1] * GRAY_WEIGHTS[1]
        + pix[:, :, 2] * GRAY_WEIGHTS[2]
    )
    h, w = gray.shape
    g = np.zeros((TOY_INPUT_SIDE, TOY_INPUT_SIDE))
    for oy in range(TOY_INPUT_SIDE):
        for ox in range(TOY_INPUT_SIDE):
            sx = min(max((ox + 0.5) * w / TOY_INPUT_SIDE - 0.5, 0.0), w - 1.0)
            sy = min(max((oy + 0.5) * h / TOY_INPUT_SIDE - 0.5, 0.0), h - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            top = gray[y0, x0] * (1 - fx) + gray[y0, x1] * fx
            bot = gray[y1, x0] * (1 - fx) + gray[y1, x1] * fx
            g[oy, ox] = top * (1 - fy) + bot * fy
    return np.tanh(provider.projection @ (g.ravel() / 255.0))


def test_toy_matches_stepwise_oracle():
    provider = ToyProvider(seed=7)
    img = random_image(20, 12, seed=1)
    got = provider.embed_image(img)
    assert np.max(np.abs(got - oracle_toy_embed(img, provider))) < 1e-12


def test_toy_zero_patch_embeds_to_zero():
    provider = ToyProvider(seed=3)
    img = RasterImage.from_array(np.zeros((8, 8, 3), np.uint8))
    assert np.all(provider.embed_image(img) == 0.0)


def test_toy_deterministic_across_instances():
    img = random_image(16, 16, seed=2)
    a = ToyProvider(seed=11).embed_image(img)
    b = ToyProvider(seed=11).embed_image(img)
    c = ToyProvider(seed=12).embed_image(img)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_toy_dims():
    provider = ToyProvider(seed=0, image_dim=48, text_dim=24)
    img = random_image(10, 10)
    assert provider.embed_image(img).shape == (48,)
    assert provider.embed_text("word").shape == (24,)
    assert np.all(np.abs(provider.embed_image(img)) < 1.0)


def test_jvp_matches_central_differences():
    provider = ToyProvider(seed=5)
    rng = np.random.default_rng(8)
    pix = rng.uniform(10, 245, size=(14, 11, 3))
    v = rng.normal(size=pix.shape)
    h = 1e-5
    fd = (provider.embed_pixels(pix + h * v) - provider.embed_pixels(pix - h * v)) / (2 * h)
    got = provider.jvp_pixels(pix, v)
    denom = np.maximum(np.abs(fd), 1e-8)
    assert np.max(np.abs(got - fd) / denom) < 1e-5


def test_vjp_agrees_with_jvp_inner_product():
    # <c, J v> must equal <J^T c, v>
    provider = ToyProvider(seed=5)
    rng = np.random.default_rng(9)
    pix = rng.uniform(0, 255, size=(9, 13, 3))
    v = rng.normal(size=pix.shape)
    c = rng.normal(size=(provider.image_dim,))
    lhs = float(c @ provider.jvp_pixels(pix, v))
    rhs = float(np.sum(provider.vjp_pixels(pix, c) * v))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# toy text embedder

def test_text_hash_oracle_and_neighbours():
    provider = ToyProvider(seed=4, text_dim=16)
    h8 = hashlib.sha256(b"shadow").digest()[:8]
    gen = SplitMix64(4 ^ int.from_bytes(h8, "little"))
    want = np.array([gen.uniform(-1.0, 1.0) for _ in range(16)])
    assert np.array_equal(provider.embed_text("shadow"), want)
    assert not np.array_equal(provider.embed_text("shadow"), provider.embed_text("shadows"))


def test_text_case_folded():
    provider = ToyProvider(seed=4)
    assert np.array_equal(provider.embed_text("Shadow"), provider.embed_text("shadow"))


@settings(max_examples=30, deadline=None)
@given(st.text(min_size=1, max_size=12))
def test_text_bounded_and_deterministic(token):
    provider = ToyProvider(seed=1, text_dim=8)
    v = provider.embed_text(token)
    assert v.shape == (8,)
    assert np.all(v >= -1.0) and np.all(v <= 1.0)
    assert np.array_equal(v, provider.embed_text(token))


# ---------------------------------------------------------------------------
# node features

def test_node_feature_averages_spatial_and_frequency():
    provider = ToyProvider(seed=6)
    img = random_image(12, 12, seed=3)
    patch = as_patch(img)
    want = 0.5 * (provider.embed_image(img) + provider.embed_image(dct_visual(img)))
    got = provider.node_feature(patch)
    assert np.max(np.abs(got - want)) < 1e-12
    assert got.shape == (provider.image_dim,)


def test_node_feature_pixels_matches_u8_path():
    provider = ToyProvider(seed=6)
    img = random_image(10, 10, seed=4)
    a = provider.node_feature(as_patch(img))
    b = provider.node_feature_pixels(img.to_f64())
    assert np.max(np.abs(a - b)) < 1e-12


# ---------------------------------------------------------------------------
# fixture files

def test_fixture_round_trip(tmp_path):
    path = tmp_path / "emb.vgfx"
    table = {
        hashlib.sha256(b"a").digest(): np.arange(4.0),
        hashlib.sha256(b"b").digest(): np.linspace(-1, 1, 4),
    }
    write_fixture(path, 4, table)
    dim, back = load_fixture(path)
    assert dim == 4
    assert set(back) == set(table)
    for k in table:
        assert np.array_equal(back[k], table[k])


def test_fixture_lookup_miss(tmp_path):
    path = tmp_path / "emb.vgfx"
    write_fixture(path, 2, {hashlib.sha256(b"x").digest(): np.zeros(2)})
    _, table = load_fixture(path)
    with pytest.raises(FixtureMissError):
        fixture_lookup(table, hashlib.sha256(b"y").digest())


def test_fixture_format_errors(tmp_path):
    bad_magic = tmp_path / "bad1"
    bad_magic.write_bytes(b"NOPE!" + bytes(4))
    with pytest.raises(FixtureFormatError):
        load_fixture(bad_magic)
    # header says dim 3 but the record carries only 2 values
    short = tmp_path / "bad2"
    short.write_bytes(b"VGFX1" + (3).to_bytes(4, "little") + bytes(32) + bytes(16))
    with pytest.raises(FixtureFormatError):
        load_fixture(short)
    with pytest.raises(FixtureFormatError):
        load_fixture(tmp_path / "absent")


def test_fixture_provider_serves_patches_and_tokens(tmp_path):
    img = random_image(6, 6, seed=5)
    vis = dct_visual(img)
    imgfix = tmp_path / "img.vgfx"
    txtfix = tmp_path / "txt.vgfx"
    write_fixture(
        imgfix,
        3,
        {patch_digest(img): np.array([1.0, 2.0, 3.0]), patch_digest(vis): np.array([4.0, 5.0, 6.0])},
    )
    write_fixture(txtfix, 2, {token_digest("blinds"): np.array([0.5, -0.5])})
    provider = FixtureProvider(str(imgfix), str(txtfix))
    assert provider.image_dim == 3 and provider.text_dim == 2
    assert np.array_equal(provider.embed_image(img), [1.0, 2.0, 3.0])
    assert np.array_equal(provider.embed_text("blinds"), [0.5, -0.5])
    assert np.array_equal(provider.node_feature(as_patch(img)), [2.5, 3.5, 4.5])
    with pytest.raises(FixtureMissError):
        provider.embed_text("unknown")


# ---------------------------------------------------------------------------
# remote client against a local stub server

class _StubHandler(http.server.BaseHTTPRequestHandler):
    fail_budget = {"count": 0}
    seen = []

    def log_message(self, *args):
        pass

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        if self.fail_budget["count"] > 0:
            self.fail_budget["count"] -= 1
            self.send_response(500)
            self.end_headers()
            return
        if self.path == "/embed/image":
            vecs = [[float(len(s)), 1.0] for s in body["images"]]
        elif self.path == "/embed/text":
            vecs = [[float(len(t)), 2.0] for t in body["tokens"]]
        else:
            self.send_response(404)
            self.end_headers()
            return
        type(self).seen.append(len(vecs))
        payload = json.dumps({"dim": 2, "vectors": vecs}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)


@pytest.fixture()
def stub_server():
    server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.fail_budget["count"] = 0
    _StubHandler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()


def test_remote_embeds_and_preserves_order(stub_server):
    provider = RemoteProvider(endpoint=stub_server, image_dim=2, text_dim=2, chunk_size=2)
    tokens = ["a", "bb", "ccc", "dddd", "eeeee"]
    vecs = provider.embed_texts(tokens)
    assert [int(v[0]) for v in vecs] == [1, 2, 3, 4, 5]
    imgs = [random_image(3, 3, seed=i) for i in range(3)]
    ivecs = provider.embed_images(imgs)
    import base64

    assert [int(v[0]) for v in ivecs] == [
        len(base64.b64encode(ppm_bytes(im)).decode()) for im in imgs
    ]


def test_remote_retries_then_succeeds(stub_server):
    _StubHandler.fail_budget["count"] = 2
    provider = RemoteProvider(endpoint=stub_server, text_dim=2, retry_base_delay=0.01)
    vec = provider.embed_text("hi")
    assert int(vec[0]) == 2


def test_remote_surfaces_attempt_count(stub_server):
    _StubHandler.fail_budget["count"] = 99
    provider = RemoteProvider(endpoint=stub_server, text_dim=2, retry_base_delay=0.01)
    with pytest.raises(TransportError) as err:
        provider.embed_text("hi")
    assert err.value.attempts == 3


def test_remote_unreachable():
    provider = RemoteProvider(endpoint="http://127.0.0.1:9", retry_base_delay=0.01, timeout=0.5)
    with pytest.raises(TransportError):
        provider.embed_text("hi")


# ---------------------------------------------------------------------------
# provider construction

def test_make_provider_kinds(tmp_path):
    toy = make_provider(ProviderConfig(kind="toy", seed=2))
    assert isinstance(toy, ToyProvider) and toy.image_dim == 64 and toy.text_dim == 32
    remote = make_provider(ProviderConfig(kind="remote", endpoint="http://x"))
    assert isinstance(remote, RemoteProvider) and remote.image_dim == 768
    with pytest.raises(ProviderError):
        make_provider(ProviderConfig(kind="remote"))
    with pytest.raises(ProviderError):
        make_provider(ProviderConfig(kind="fixture"))
    with pytest.raises(ProviderError):
        make_provider(ProviderConfig(kind="mystery"))


def test_provider_config_json_round_trip():
    cfg = ProviderConfig(kind="toy", seed=9, dep_source="chain")
    assert ProviderConfig.from_json(cfg.to_json()) == cfg
