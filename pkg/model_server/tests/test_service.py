"""Service routing, validation, limits, and the HTTP wire contract."""

import base64
import json
import socket
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import requests

from model_server import ppm
from model_server.backends import DeterministicBackend
from model_server.service import MAX_BATCH_ITEMS, ModelService, make_server

IMAGE_DIM = 32
TEXT_DIM = 24


def post(service: ModelService, route: str, obj) -> tuple:
    return service.handle(route, json.dumps(obj).encode("utf-8"))


def random_image(side: int = 20, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(side, side, 3), dtype=np.uint8)


def b64_image(pixels: np.ndarray) -> str:
    return base64.b64encode(ppm.serialize(pixels)).decode("ascii")


def planted_image(side: int = 60, grid_n: int = 3, row: int = 1, col: int = 2) -> np.ndarray:
    ramp = np.linspace(40, 200, side)
    px = np.zeros((side, side, 3))
    px[:] = ramp[None, :, None]
    cell = side // grid_n
    ys, xs = np.mgrid[0:cell, 0:cell]
    wave = 40.0 * np.cos(np.pi * (ys + xs))
    px[row * cell : (row + 1) * cell, col * cell : (col + 1) * cell] += wave[:, :, None]
    return np.clip(px, 0, 255).astype(np.uint8)


@pytest.fixture(scope="module")
def backend():
    return DeterministicBackend(seed=7, image_dim=IMAGE_DIM, text_dim=TEXT_DIM)


@pytest.fixture(scope="module")
def service(backend):
    return ModelService(backend)


class TestValidation:
    def test_unknown_route(self, service):
        status, body = post(service, "/embed/video", {})
        assert status == 404 and "error" in body

    def test_body_not_json(self, service):
        status, body = service.handle("/parse", b"{not json")
        assert status == 400 and "JSON" in body["error"]

    def test_body_not_an_object(self, service):
        status, body = post(service, "/parse", [1, 2])
        assert status == 400 and "object" in body["error"]

    def test_images_must_be_a_list(self, service):
        status, _ = post(service, "/embed/image", {"images": "abc"})
        assert status == 400

    def test_image_entries_must_be_strings(self, service):
        status, _ = post(service, "/embed/image", {"images": [3]})
        assert status == 400

    def test_image_rejects_bad_base64(self, service):
        status, body = post(service, "/embed/image", {"images": ["@@@not-base64@@@"]})
        assert status == 400 and "base64" in body["error"]

    def test_image_rejects_non_p6_payload(self, service):
        blob = base64.b64encode(b"GIF89a totally not a ppm").decode("ascii")
        status, body = post(service, "/embed/image", {"images": [blob]})
        assert status == 400 and "P6" in body["error"]

    def test_tokens_must_all_be_strings(self, service):
        status, _ = post(service, "/embed/text", {"tokens": ["ok", 5]})
        assert status == 400

    def test_sentence_required(self, service):
        status, _ = post(service, "/parse", {"text": "wrong key"})
        assert status == 400

    def test_grid_n_rejects_bool(self, service):
        status, _ = post(service, "/explain", {"image": b64_image(random_image()), "grid_n": True})
        assert status == 400

    def test_grid_n_must_be_positive(self, service):
        status, _ = post(service, "/explain", {"image": b64_image(random_image()), "grid_n": 0})
        assert status == 400

    def test_grid_finer_than_pixels(self, service):
        status, body = post(service, "/explain", {"image": b64_image(random_image(4)), "grid_n": 4})
        assert status == 400

    def test_batch_limit_tokens(self, service):
        status, _ = post(service, "/embed/text", {"tokens": ["t"] * (MAX_BATCH_ITEMS + 1)})
        assert status == 413

    def test_batch_limit_images(self, service):
        status, _ = post(service, "/embed/image", {"images": ["x"] * (MAX_BATCH_ITEMS + 1)})
        assert status == 413

    def test_configured_body_cap(self, backend):
        small = ModelService(backend, max_body=64)
        status, _ = post(small, "/embed/text", {"tokens": ["t" * 200]})
        assert status == 413


class TestUnloadedBackend:
    def test_all_routes_answer_503(self):
        empty = ModelService(None)
        for route in ("/embed/image", "/embed/text", "/parse", "/explain"):
            status, body = post(empty, route, {})
            assert status == 503, route
            assert "not loaded" in body["error"]

    def test_healthz_reports_unloaded(self):
        health = ModelService(None).healthz()
        assert health == {"status": "unloaded", "models": None}

    def test_healthz_reports_metadata_when_loaded(self, service):
        health = service.healthz()
        assert health["status"] == "ok"
        assert health["models"]["image"]["pooling"] == "final global-pool output"


@pytest.fixture(scope="module")
def server_url(service):
    httpd = make_server(service)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    host, port = httpd.server_address[:2]
    yield f"http://{host}:{port}"
    httpd.shutdown()


class TestWire:
    def test_healthz(self, server_url):
        r = requests.get(server_url + "/healthz", timeout=10)
        assert r.status_code == 200
        assert r.json()["status"] == "ok"

    def test_get_unknown_path(self, server_url):
        r = requests.get(server_url + "/embed/text", timeout=10)
        assert r.status_code == 404

    def test_post_without_content_length(self, server_url):
        host, port = server_url.removeprefix("http://").split(":")
        with socket.create_connection((host, int(port)), timeout=10) as sock:
            sock.sendall(b"POST /parse HTTP/1.1\r\nHost: test\r\nConnection: close\r\n\r\n")
            reply = sock.recv(4096).decode("latin-1", "replace")
        assert reply.startswith("HTTP/1.1 400")

    def test_embed_text_repeatable(self, server_url):
        payload = {"tokens": ["alpha", "beta", "alpha"]}
        first = requests.post(server_url + "/embed/text", json=payload, timeout=10).json()
        second = requests.post(server_url + "/embed/text", json=payload, timeout=10).json()
        assert first == second
        assert first["dim"] == TEXT_DIM
        assert first["vectors"][0] == first["vectors"][2]
        assert first["vectors"][0] != first["vectors"][1]

    def test_batch_order_matches_single_calls(self, server_url):
        tokens = ["one", "two", "three", "four"]
        batch = requests.post(server_url + "/embed/text", json={"tokens": tokens}, timeout=10).json()
        for i, tok in enumerate(tokens):
            single = requests.post(server_url + "/embed/text", json={"tokens": [tok]}, timeout=10).json()
            assert batch["vectors"][i] == single["vectors"][0]

    def test_embed_image_matches_backend(self, server_url, backend):
        pixels = random_image(seed=4)
        r = requests.post(
            server_url + "/embed/image", json={"images": [b64_image(pixels)]}, timeout=10
        )
        assert r.status_code == 200
        body = r.json()
        assert body["dim"] == IMAGE_DIM
        got = np.asarray(body["vectors"][0])
        assert np.array_equal(got, backend.image_vector(pixels))

    def test_parse_returns_a_tree(self, server_url):
        sentence = "The handle appears distorted, bending unnaturally."
        body = requests.post(server_url + "/parse", json={"sentence": sentence}, timeout=10).json()
        tokens, edges = body["tokens"], body["edges"]
        assert len(edges) == len(tokens) - 1
        deps = [dep for _, dep in edges]
        assert len(set(deps)) == len(deps) and 0 not in deps
        assert all(0 <= head < len(tokens) for head, _ in edges)

    def test_explain_output_parses_under_label_grammar(self, server_url):
        from vigtext.textgraph import parse_explanations

        r = requests.post(
            server_url + "/explain",
            json={"image": b64_image(planted_image()), "grid_n": 3},
            timeout=10,
        )
        assert r.status_code == 200
        text = r.json()["text"]
        assert text
        records, diagnostics = parse_explanations(text, 3)
        assert diagnostics == []
        assert len(records) == 1
        assert records[0].labels == ("B3",)

    def test_remote_provider_speaks_to_server(self, server_url, backend):
        from vigtext.embed import RemoteProvider
        from vigtext.raster import RasterImage

        provider = RemoteProvider(endpoint=server_url, image_dim=IMAGE_DIM, text_dim=TEXT_DIM)
        pixels = [random_image(seed=s) for s in (10, 11, 12)]
        images = [RasterImage(p.shape[1], p.shape[0], p) for p in pixels]
        vectors = provider.embed_images(images)
        for vec, px in zip(vectors, pixels):
            assert np.array_equal(np.asarray(vec), backend.image_vector(px))
        texts = provider.embed_texts(["slats", "shimmer"])
        assert np.array_equal(np.asarray(texts[0]), backend.token_vector("slats"))
        tokens, edges = provider.parse_sentence("Shadows fall in one direction.")
        assert len(edges) == len(tokens) - 1

    def test_concurrent_requests_stay_isolated(self, server_url, backend):
        words = [f"word{i}" for i in range(24)]

        def fetch(word: str):
            body = requests.post(server_url + "/embed/text", json={"tokens": [word]}, timeout=30)
            return word, body.json()["vectors"][0]

        with ThreadPoolExecutor(max_workers=8) as pool:
            for word, vec in pool.map(fetch, words):
                assert np.array_equal(np.asarray(vec), backend.token_vector(word))

    def test_oversize_body_refused_at_the_socket(self, backend):
        capped = make_server(ModelService(backend, max_body=1000))
        thread = threading.Thread(target=capped.serve_forever, daemon=True)
        thread.start()
        try:
            host, port = capped.server_address[:2]
            url = f"http://{host}:{port}"
            big = {"tokens": ["x" * 5000]}
            r = requests.post(url + "/embed/text", json=big, timeout=10)
            assert r.status_code == 413
            ok = requests.post(url + "/embed/text", json={"tokens": ["x"]}, timeout=10)
            assert ok.status_code == 200
        finally:
            capped.shutdown()
