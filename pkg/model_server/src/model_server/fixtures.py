"""Offline fixture generation for the detector's test environments.

`fixture_gen` walks a dataset manifest and precomputes everything the
detector would otherwise request from the live service: an embedding
record for every grid patch and for its frequency visual, one for every
token its explanation parser will look up, and the dependency parse of
every explanation sentence. The detector's fixture provider then serves
graphs with zero network calls and zero misses.

File formats (shared contracts, written by this module's own encoders):

    embedding fixture  "VGFX1" magic, little-endian u32 dim, then
                       records of 32-byte SHA-256 digest + dim f64 LE.
                       Image records are keyed by the digest of the
                       patch's canonical P6 bytes, text records by the
                       digest of the UTF-8 token.
    dependency fixture JSON lines {"sentence_digest": hex sha256,
                       "tokens": [...], "edges": [[head, dep], ...]}.

Records are sorted by digest so regeneration is byte-identical.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vigtext.dct import dct_visual_f
from vigtext.pipeline import load_manifest
from vigtext.raster import RasterImage, load_image, split_patches
from vigtext.textgraph import parse_explanations

from . import ppm
from .backends import DeterministicBackend

FIXTURE_MAGIC = b"VGFX1"


def write_embedding_fixture(path, dim: int, table: dict) -> None:
    """table: {32-byte digest: vector}; records sorted by digest."""
    blob = bytearray()
    blob += FIXTURE_MAGIC
    blob += struct.pack("<I", dim)
    for digest in sorted(table):
        vec = np.asarray(table[digest], dtype=np.float64)
        if vec.shape != (dim,):
            raise ValueError(f"vector has shape {vec.shape}, fixture dim is {dim}")
        blob += digest
        blob += vec.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def write_dependency_fixture(path, rows: dict) -> None:
    """rows: {sentence digest hex: (tokens, edges)}; sorted by digest."""
    lines = []
    for digest in sorted(rows):
        tokens, edges = rows[digest]
        lines.append(
            json.dumps(
                {
                    "sentence_digest": digest,
                    "tokens": list(tokens),
                    "edges": [[int(a), int(b)] for a, b in edges],
                },
                sort_keys=True,
            )
        )
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _frequency_visual(img: RasterImage) -> RasterImage:
    """The quantized spectrum image the detector embeds alongside each patch."""
    vis = dct_visual_f(img.to_f64()).astype(np.uint8)
    return RasterImage(width=img.width, height=img.height, pixels=vis)


@dataclass(frozen=True)
class FixtureGenResult:
    image_fixture: Path
    text_fixture: Path
    dep_fixture: Path
    image_records: int
    text_records: int
    sentences: int


def fixture_gen(manifest_path, out_dir, backend: DeterministicBackend | None = None) -> FixtureGenResult:
    """Precompute fixtures for every entry of the manifest at manifest_path.

    Writes images.vgfx, tokens.vgfx, and deps.jsonl under out_dir and
    returns their paths with record counts.
    """
    backend = backend or DeterministicBackend()
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    image_table = {}
    token_table = {}
    dep_rows = {}
    for entry in manifest.entries:
        img = load_image(manifest.resolve(entry.image))
        for patch in split_patches(img, manifest.grid_n):
            for query in (patch.image, _frequency_visual(patch.image)):
                digest = ppm.digest(query.pixels)
                if digest not in image_table:
                    image_table[digest] = backend.image_vector(query.pixels)
        records, _ = parse_explanations(manifest.explanation_for(entry), manifest.grid_n)
        for rec in records:
            digest = hashlib.sha256(rec.sentence.encode("utf-8")).hexdigest()
            if digest in dep_rows:
                continue
            tokens, edges = backend.parse(rec.sentence)
            dep_rows[digest] = (tokens, edges)
            for token in tokens:
                key = hashlib.sha256(token.encode("utf-8")).digest()
                if key not in token_table:
                    token_table[key] = backend.token_vector(token)

    result = FixtureGenResult(
        image_fixture=out / "images.vgfx",
        text_fixture=out / "tokens.vgfx",
        dep_fixture=out / "deps.jsonl",
        image_records=len(image_table),
        text_records=len(token_table),
        sentences=len(dep_rows),
    )
    write_embedding_fixture(result.image_fixture, backend.image_dim, image_table)
    write_embedding_fixture(result.text_fixture, backend.text_dim, token_table)
    write_dependency_fixture(result.dep_fixture, dep_rows)
    return result
