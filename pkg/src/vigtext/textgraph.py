"""Explanation text: record parsing, tokenization, and word graphs.

Explanation text arrives as lines of ``{A1,B2}: sentence``. Each line
with at least one valid in-grid label becomes a record; a record plus a
dependency parse becomes a word graph whose nodes are token embeddings.
"""

import json
import string
from dataclasses import dataclass, replace
from hashlib import sha256
from importlib import resources

import numpy as np

from .errors import FixtureFormatError
from .raster import parse_label

_PUNCT = set(string.punctuation)


@dataclass(frozen=True)
class ExplanationRecord:
    labels: tuple  # patch labels, sorted by (row, col)
    sentence: str
    tokens: tuple = ()
    dep_edges: tuple = ()  # (head index, dependent index) pairs


@dataclass
class TextGraph:
    features: list  # one vector per token
    edges: list  # undirected (i, j) token index pairs, no self-loops
    anchor_labels: tuple


def _label_shaped(part: str) -> bool:
    part = part.strip()
    if not (2 <= len(part) <= 5):
        return False
    head = part.rstrip("0123456789")
    tail = part[len(head):]
    return head.isalpha() and tail.isdigit()


def parse_explanations(text: str, grid_n: int):
    """Parse explanation text into records.

    Returns (records, diagnostics). Lines without any label-shaped head
    part are ignored; label-shaped parts that are malformed or outside
    the grid are dropped with a diagnostic, and a line whose labels all
    drop yields no record.
    """
    if grid_n < 1:
        raise ValueError("grid_n must be >= 1")
    records = []
    diagnostics = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or ":" not in line:
            continue
        head, _, rest = line.partition(":")
        head = head.strip().lstrip("[{").rstrip("]}").strip()
        parts = [p.strip() for p in head.split(",") if p.strip()]
        if not any(_label_shaped(p) for p in parts):
            continue
        kept = {}
        for part in parts:
            if not _label_shaped(part):
                diagnostics.append(f"line {lineno}: malformed label {part!r}")
                continue
            label = part.upper()
            pos = parse_label(label)
            if pos is None:
                diagnostics.append(f"line {lineno}: malformed label {part!r}")
                continue
            row, col = pos
            if row >= grid_n or col >= grid_n:
                diagnostics.append(f"line {lineno}: label {label} outside {grid_n}x{grid_n} grid")
                continue
            kept[(row, col)] = label
        if not kept:
            continue
        labels = tuple(kept[pos] for pos in sorted(kept))
        records.append(ExplanationRecord(labels=labels, sentence=rest.strip()))
    return records, diagnostics


def format_records(records) -> str:
    """Render records in the same line grammar parse_explanations reads."""
    return "\n".join("{" + ",".join(r.labels) + "}: " + r.sentence for r in records)


def tokenize(sentence: str) -> list:
    """Whitespace split, then peel boundary punctuation into own tokens.

    Interior punctuation (apostrophes, hyphens) stays inside the token.
    """
    tokens = []
    for chunk in sentence.split():
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


def attach_dependencies(record: ExplanationRecord, edges):
    """Attach validated dependency edges to a tokenized record.

    Self-loops and duplicate pairs (either orientation) are dropped with
    a diagnostic. Returns (record, diagnostics).
    """
    k = len(record.tokens)
    if k == 0:
        raise ValueError("record must be tokenized before attaching dependencies")
    seen = set()
    kept = []
    diagnostics = []
    for head, dep in edges:
        head, dep = int(head), int(dep)
        if not (0 <= head < k and 0 <= dep < k):
            raise ValueError(f"dependency ({head},{dep}) outside token range 0..{k - 1}")
        if head == dep:
            diagnostics.append(f"self-loop dependency ({head},{dep}) removed")
            continue
        key = (min(head, dep), max(head, dep))
        if key in seen:
            diagnostics.append(f"duplicate dependency ({head},{dep}) removed")
            continue
        seen.add(key)
        kept.append((head, dep))
    return replace(record, dep_edges=tuple(kept)), diagnostics


def chain_dependencies(tokens) -> list:
    """Fallback parse: a left-to-right chain, always a tree."""
    return [(i - 1, i) for i in range(1, len(tokens))]


def tokenize_record(record: ExplanationRecord) -> ExplanationRecord:
    return replace(record, tokens=tuple(tokenize(record.sentence)))


def build_text_graph(record: ExplanationRecord, provider) -> TextGraph:
    if not record.tokens:
        raise ValueError("cannot build a text graph from an untokenized record")
    features = [np.asarray(v, dtype=np.float64) for v in provider.embed_texts(record.tokens)]
    return TextGraph(
        features=features,
        edges=[(min(a, b), max(a, b)) for a, b in record.dep_edges],
        anchor_labels=record.labels,
    )


# ---------------------------------------------------------------------------
# dependency fixtures (JSON lines keyed by sentence digest)

def sentence_digest(sentence: str) -> str:
    return sha256(sentence.encode("utf-8")).hexdigest()


def load_dep_fixture(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError as exc:
        raise FixtureFormatError(f"no such dependency fixture: {path}") from exc
    table = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FixtureFormatError(f"{path}:{lineno}: bad JSON") from exc
        try:
            digest = obj["sentence_digest"]
            tokens = [str(t) for t in obj["tokens"]]
            edges = [(int(a), int(b)) for a, b in obj["edges"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise FixtureFormatError(f"{path}:{lineno}: bad record shape") from exc
        if not isinstance(digest, str) or len(digest) != 64:
            raise FixtureFormatError(f"{path}:{lineno}: bad sentence digest")
        table[digest] = (tokens, edges)
    return table


def write_dep_fixture(path, entries) -> None:
    """entries: iterable of (sentence, tokens, edges); sorted by digest."""
    rows = []
    for sentence, tokens, edges in entries:
        rows.append(
            {
                "sentence_digest": sentence_digest(sentence),
                "tokens": list(tokens),
                "edges": [[int(a), int(b)] for a, b in edges],
            }
        )
    rows.sort(key=lambda r: r["sentence_digest"])
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def prompt_template(path=None) -> str:
    """The explanation-generation prompt; a path overrides the default."""
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    return resources.files("vigtext").joinpath("assets/prompt.txt").read_text("utf-8")
