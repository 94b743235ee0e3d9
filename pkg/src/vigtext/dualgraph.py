"""The combined patch/word graph and its canonical serialization.

Patch nodes sit at indices 0..n*n-1 in row-major label order; word
nodes follow grouped by record. Edges are undirected, stored once with
endpoints ordered (a < b), and expanded to directed pairs only inside
the classifier.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphSchemaError
from .raster import label_for, parse_label

FORMAT_VERSION = "vigtext-graph/1"
NODE_KINDS = ("patch", "word")
EDGE_KINDS = ("adjacency", "dependency", "cross")


@dataclass
class GraphNode:
    kind: str
    feature: np.ndarray
    origin: object  # patch label, or (record index, token index)

    def __eq__(self, other):
        if not isinstance(other, GraphNode):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.origin == other.origin
            and self.feature.shape == other.feature.shape
            and np.array_equal(self.feature, other.feature)
        )


@dataclass(frozen=True)
class GraphEdge:
    kind: str
    a: int
    b: int


@dataclass
class DualGraph:
    nodes: list
    edges: list
    grid_n: int
    label: int | None = None

    def __eq__(self, other):
        if not isinstance(other, DualGraph):
            return NotImplemented
        return (
            self.grid_n == other.grid_n
            and self.label == other.label
            and self.nodes == other.nodes
            and self.edges == other.edges
        )

    def feature_matrix(self) -> np.ndarray:
        return np.stack([node.feature for node in self.nodes])


def build_image_graph(patches, provider, eight_connect: bool = False) -> DualGraph:
    """Patch nodes plus neighbor adjacency (4-connected by default).

    Edge count is 2n(n-1), plus 2(n-1)^2 diagonals when eight_connect.
    """
    n2 = len(patches)
    n = int(round(n2**0.5))
    if n * n != n2 or n2 == 0:
        raise GraphSchemaError(f"{n2} patches do not form a square grid")
    by_pos = {(p.row, p.col): p for p in patches}
    if set(by_pos) != {(r, c) for r in range(n) for c in range(n)}:
        raise GraphSchemaError("patch grid has gaps or duplicates")
    for p in patches:
        if p.label != label_for(p.row, p.col):
            raise GraphSchemaError(f"patch at ({p.row},{p.col}) mislabelled {p.label!r}")
    ordered = [by_pos[(r, c)] for r in range(n) for c in range(n)]
    features = [provider.node_feature(p) for p in ordered]
    nodes = [
        GraphNode(kind="patch", feature=np.asarray(f, dtype=np.float64), origin=p.label)
        for p, f in zip(ordered, features)
    ]
    edges = []
    for r in range(n):
        for c in range(n):
            i = r * n + c
            if c + 1 < n:
                edges.append(GraphEdge("adjacency", i, i + 1))
            if r + 1 < n:
                edges.append(GraphEdge("adjacency", i, i + n))
            if eight_connect:
                if r + 1 < n and c + 1 < n:
                    edges.append(GraphEdge("adjacency", i, i + n + 1))
                if r + 1 < n and c - 1 >= 0:
                    edges.append(GraphEdge("adjacency", i, i + n - 1))
    return DualGraph(nodes=nodes, edges=edges, grid_n=n)


def integrate(g: DualGraph, text_graphs) -> DualGraph:
    """Append word graphs and connect each word to its anchored patches.

    Word and patch features are zero-padded at the tail to a shared
    dimension. Adds sum(tokens * anchors) cross edges.
    """
    nodes = [GraphNode(n.kind, n.feature.copy(), n.origin) for n in g.nodes]
    edges = list(g.edges)
    n = g.grid_n
    for rec_idx, tg in enumerate(text_graphs):
        offset = len(nodes)
        anchor_indices = []
        for lbl in tg.anchor_labels:
            pos = parse_label(lbl)
            if pos is None or pos[0] >= n or pos[1] >= n:
                raise GraphSchemaError(f"anchor label {lbl!r} has no patch node in a {n}x{n} grid")
            anchor_indices.append(pos[0] * n + pos[1])
        for tok_idx, feat in enumerate(tg.features):
            nodes.append(
                GraphNode(
                    kind="word",
                    feature=np.asarray(feat, dtype=np.float64),
                    origin=(rec_idx, tok_idx),
                )
            )
        for i, j in tg.edges:
            a, b = offset + min(i, j), offset + max(i, j)
            edges.append(GraphEdge("dependency", a, b))
        for tok_idx in range(len(tg.features)):
            for pi in anchor_indices:
                edges.append(GraphEdge("cross", pi, offset + tok_idx))
    dim = max(node.feature.shape[0] for node in nodes)
    for node in nodes:
        short = dim - node.feature.shape[0]
        if short:
            node.feature = np.pad(node.feature, (0, short))
    return DualGraph(nodes=nodes, edges=edges, grid_n=n, label=g.label)


def validate(g: DualGraph) -> None:
    """Raise GraphSchemaError on any type-invariant violation."""
    if g.grid_n < 1:
        raise GraphSchemaError("grid_n must be >= 1")
    if g.label not in (None, 0, 1):
        raise GraphSchemaError(f"label must be 0, 1 or absent, got {g.label!r}")
    n2 = g.grid_n * g.grid_n
    patch_nodes = [node for node in g.nodes if node.kind == "patch"]
    if len(patch_nodes) != n2:
        raise GraphSchemaError(f"want {n2} patch nodes, have {len(patch_nodes)}")
    dims = set()
    for idx, node in enumerate(g.nodes):
        if node.kind not in NODE_KINDS:
            raise GraphSchemaError(f"node {idx}: bad kind {node.kind!r}")
        if node.feature.ndim != 1:
            raise GraphSchemaError(f"node {idx}: feature must be a vector")
        if not np.all(np.isfinite(node.feature)):
            raise GraphSchemaError(f"node {idx}: non-finite feature")
        dims.add(node.feature.shape[0])
        if idx < n2:
            if node.kind != "patch" or node.origin != label_for(idx // g.grid_n, idx % g.grid_n):
                raise GraphSchemaError(f"node {idx}: patch nodes must lead in row-major order")
        elif node.kind == "word":
            origin = node.origin
            if not (isinstance(origin, tuple) and len(origin) == 2):
                raise GraphSchemaError(f"node {idx}: word origin must be (record, token)")
    if len(dims) > 1:
        raise GraphSchemaError(f"mixed feature dimensions {sorted(dims)}")
    seen = set()
    for e in g.edges:
        if e.kind not in EDGE_KINDS:
            raise GraphSchemaError(f"bad edge kind {e.kind!r}")
        if not (0 <= e.a < len(g.nodes) and 0 <= e.b < len(g.nodes)):
            raise GraphSchemaError(f"edge ({e.a},{e.b}) out of range")
        if e.a >= e.b:
            raise GraphSchemaError(f"edge ({e.a},{e.b}) must be ordered a < b, no self-loops")
        if (e.a, e.b, e.kind) in seen:
            raise GraphSchemaError(f"duplicate edge ({e.a},{e.b},{e.kind})")
        seen.add((e.a, e.b, e.kind))
        ka, kb = g.nodes[e.a].kind, g.nodes[e.b].kind
        if e.kind == "adjacency" and (ka, kb) != ("patch", "patch"):
            raise GraphSchemaError("adjacency edges must join patch nodes")
        if e.kind == "dependency":
            if (ka, kb) != ("word", "word"):
                raise GraphSchemaError("dependency edges must join word nodes")
            if g.nodes[e.a].origin[0] != g.nodes[e.b].origin[0]:
                raise GraphSchemaError("dependency edge spans records")
        if e.kind == "cross" and {ka, kb} != {"patch", "word"}:
            raise GraphSchemaError("cross edges must join a word to a patch")


# ---------------------------------------------------------------------------
# canonical serialization

def _feature_hex(vec: np.ndarray) -> str:
    return struct.pack(f"<{len(vec)}d", *vec).hex()


def _feature_from_hex(text: str) -> np.ndarray:
    if len(text) % 16 != 0:
        raise GraphSchemaError("feature hex length must be a multiple of 16")
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise GraphSchemaError("feature is not valid hex") from exc
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def serialize(g: DualGraph) -> bytes:
    validate(g)
    obj = {
        "format": FORMAT_VERSION,
        "grid_n": g.grid_n,
        "label": g.label,
        "nodes": [
            {
                "kind": node.kind,
                "origin": node.origin if node.kind == "patch" else list(node.origin),
                "feature": _feature_hex(node.feature),
            }
            for node in g.nodes
        ],
        "edges": [{"kind": e.kind, "a": e.a, "b": e.b} for e in g.edges],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def deserialize(data: bytes) -> DualGraph:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise GraphSchemaError(f"not valid graph JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_VERSION:
        raise GraphSchemaError(f"expected format {FORMAT_VERSION!r}")
    expected_keys = {"format", "grid_n", "label", "nodes", "edges"}
    if set(obj) != expected_keys:
        raise GraphSchemaError(f"graph keys must be {sorted(expected_keys)}")
    grid_n, label = obj["grid_n"], obj["label"]
    if not isinstance(grid_n, int) or isinstance(grid_n, bool):
        raise GraphSchemaError("grid_n must be an integer")
    nodes = []
    for idx, spec in enumerate(obj["nodes"]):
        if set(spec) != {"kind", "origin", "feature"}:
            raise GraphSchemaError(f"node {idx}: bad keys")
        kind = spec["kind"]
        if kind == "patch":
            if not isinstance(spec["origin"], str):
                raise GraphSchemaError(f"node {idx}: patch origin must be a label")
            origin = spec["origin"]
        elif kind == "word":
            o = spec["origin"]
            if not (isinstance(o, list) and len(o) == 2 and all(isinstance(v, int) for v in o)):
                raise GraphSchemaError(f"node {idx}: word origin must be [record, token]")
            origin = tuple(o)
        else:
            raise GraphSchemaError(f"node {idx}: bad kind {kind!r}")
        nodes.append(GraphNode(kind=kind, feature=_feature_from_hex(spec["feature"]), origin=origin))
    edges = []
    for idx, spec in enumerate(obj["edges"]):
        if set(spec) != {"kind", "a", "b"}:
            raise GraphSchemaError(f"edge {idx}: bad keys")
        if spec["kind"] not in EDGE_KINDS:
            raise GraphSchemaError(f"edge {idx}: bad kind {spec['kind']!r}")
        if not all(isinstance(spec[k], int) and not isinstance(spec[k], bool) for k in ("a", "b")):
            raise GraphSchemaError(f"edge {idx}: endpoints must be integers")
        edges.append(GraphEdge(kind=spec["kind"], a=spec["a"], b=spec["b"]))
    g = DualGraph(nodes=nodes, edges=edges, grid_n=grid_n, label=label)
    validate(g)
    return g
