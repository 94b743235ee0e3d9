"""Deterministic stand-ins for the served models.

The service exposes four model slots: an image backbone, a word
embedder, a dependency parser, and an explanation generator. This
backend fills all four with closed-form deterministic functions (seeded
projections, a heuristic projective parser, a frequency-artifact
scanner) so responses and generated fixtures are reproducible on any
machine. Real weights can replace it behind the same interface.
"""

import hashlib
import re
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn

INPUT_SIDE = 24  # backbone native input; the server owns resizing

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:['\-][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")


def _seeded_rng(*parts) -> np.random.Generator:
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def _nearest_resize(gray: np.ndarray, side: int) -> np.ndarray:
    h, w = gray.shape
    rows = np.minimum(((np.arange(side) + 0.5) * h / side).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * w / side).astype(np.int64), w - 1)
    return gray[np.ix_(rows, cols)]


def cell_label(row: int, col: int) -> str:
    """Spreadsheet-style grid label: row letters, 1-based column."""
    letters = ""
    r = row
    while True:
        letters = chr(ord("A") + r % 26) + letters
        r = r // 26 - 1
        if r < 0:
            break
    return f"{letters}{col + 1}"


@dataclass
class DeterministicBackend:
    seed: int = 0
    image_dim: int = 768
    text_dim: int = 768
    # fraction of AC energy in the high-frequency quadrant above which a
    # cell is reported as synthetic; calibrated on the paired synthetic
    # scenes (planted checkerboards score >= 0.65, natural cells < 0.11)
    artifact_threshold: float = 0.5
    _projection: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.image_dim < 1 or self.text_dim < 1:
            raise ValueError("embedding dims must be >= 1")
        n_in = INPUT_SIDE * INPUT_SIDE
        rng = _seeded_rng("image-backbone", self.seed)
        self._projection = rng.standard_normal((self.image_dim, n_in)) / np.sqrt(n_in)

    # -- embedding slots ----------------------------------------------------

    def image_vector(self, pixels: np.ndarray) -> np.ndarray:
        gray = np.asarray(pixels, dtype=np.float64).mean(axis=2)
        g = _nearest_resize(gray, INPUT_SIDE).ravel() / 255.0 - 0.5
        return np.tanh(self._projection @ g)

    def image_vectors(self, images) -> list:
        return [self.image_vector(p) for p in images]

    def token_vector(self, token: str) -> np.ndarray:
        rng = _seeded_rng("word-embedder", self.seed, token)
        return rng.uniform(-1.0, 1.0, size=self.text_dim)

    def token_vectors(self, tokens) -> list:
        return [self.token_vector(t) for t in tokens]

    # -- dependency parser ----------------------------------------------------

    def parse(self, sentence: str):
        """Tokenize and emit a projective head->dependent tree.

        Words keep interior apostrophes and hyphens; every other
        non-space character is its own token. Each token after the
        first attaches to the most recent word token (or, failing
        that, its left neighbor), so the result is always a tree with
        len(tokens) - 1 edges.
        """
        tokens = _WORD_RE.findall(sentence)
        edges = []
        last_word = None
        for i, tok in enumerate(tokens):
            if i > 0:
                head = last_word if last_word is not None else i - 1
                edges.append((head, i))
            if tok[0].isalnum():
                last_word = i
        return tokens, edges

    # -- explanation generator ------------------------------------------------

    def _high_band_share(self, cell: np.ndarray) -> float:
        luma = cell.mean(axis=2)
        coeffs = dctn(luma - luma.mean(), type=2, norm="ortho")
        energy = float(np.sum(coeffs**2))
        if energy <= 0.0:
            return 0.0
        h, w = coeffs.shape
        high = coeffs[h // 2 :, w // 2 :]
        return float(np.sum(high**2)) / energy

    def overlay_grid(self, pixels: np.ndarray, grid_n: int) -> np.ndarray:
        """Dark single-pixel rules on the interior cell boundaries."""
        out = np.asarray(pixels, dtype=np.uint8).copy()
        h, w = out.shape[:2]
        for k in range(1, grid_n):
            out[min(k * h // grid_n, h - 1), :, :] = 0
            out[:, min(k * w // grid_n, w - 1), :] = 0
        return out

    def explain(self, pixels: np.ndarray, grid_n: int) -> str:
        """Greedy (temperature-0) explanation for an original image.

        The grid overlay is produced server-side and consumed together
        with the original, matching how the generation prompt presents
        both; the scanner itself reads cell content from the original
        so the rules do not contaminate the spectra.
        """
        if grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        pixels = np.asarray(pixels, dtype=np.uint8)
        self.overlay_grid(pixels, grid_n)  # part of the documented input flow
        h, w = pixels.shape[:2]
        ch, cw = h // grid_n, w // grid_n
        if ch < 2 or cw < 2:
            raise ValueError(f"grid {grid_n} leaves cells below 2x2 on {w}x{h}")
        flagged = []
        for r in range(grid_n):
            for c in range(grid_n):
                cell = pixels[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw].astype(np.float64)
                if self._high_band_share(cell) > self.artifact_threshold:
                    flagged.append(cell_label(r, c))
        if not flagged:
            return ""
        cells = ", ".join(flagged)
        return (
            "{" + ",".join(flagged) + "}: "
            f"Cell {cells} shows a dense checkerboard texture with abrupt "
            "pixel-level alternation that does not continue into the "
            "neighboring surfaces, a pattern typical of synthetic upsampling."
        )

    # -- metadata -------------------------------------------------------------

    def info(self) -> dict:
        return {
            "image": {
                "name": "deterministic-projection",
                "dim": self.image_dim,
                "input_side": INPUT_SIDE,
                "pooling": "final global-pool output",
            },
            "text": {"name": "deterministic-hash", "dim": self.text_dim},
            "parser": {"name": "projective-heuristic"},
            "explainer": {"name": "frequency-scanner", "decoding": "greedy"},
            "seed": self.seed,
        }
