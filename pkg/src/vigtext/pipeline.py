"""Dataset manifests, synthetic data, training loop, and metric reports.

A manifest is the unit of work: it names images, their explanation
text, binary labels, and split assignments, plus the grid size and the
embedding provider everything downstream must use. Graphs are cached on
disk keyed by content digests so re-runs touch each (image,
explanation) pair once per provider.
"""

import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dualgraph import build_image_graph, deserialize, integrate, serialize
from .embed import ProviderConfig, RemoteProvider, make_provider, patch_digest
from .errors import (
    CheckpointError,
    DataError,
    FixtureMissError,
    GraphSchemaError,
    ManifestError,
    ProviderError,
)
from .fsio import atomic_write_bytes, atomic_write_json, atomic_write_text
from .gnn import (
    ModelConfig,
    ModelParams,
    adam_init,
    adam_step,
    backward_from_cotangent,
    forward,
    init_model,
    load_checkpoint,
    loss_ce,
    loss_ce_grad,
    lr_at,
    save_checkpoint,
)
from .raster import RasterImage, label_for, load_image, quantize_u8, save_ppm, split_patches
from .rng import seed_from_parts
from .textgraph import (
    ExplanationRecord,
    attach_dependencies,
    build_text_graph,
    chain_dependencies,
    format_records,
    load_dep_fixture,
    parse_explanations,
    sentence_digest,
    tokenize,
)

MANIFEST_FORMAT = "vigtext-manifest/1"
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestEntry:
    image: str  # path relative to the manifest directory
    label: int  # 0 = real, 1 = generated
    split: str  # train | val | test | extra:<name>
    explanation: str | None = None  # path to explanation text
    explanation_text: str | None = None  # inline alternative


@dataclass
class DatasetManifest:
    grid_n: int
    provider: ProviderConfig
    entries: list
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def entries_for(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def explanation_for(self, entry: ManifestEntry) -> str:
        if entry.explanation_text is not None:
            return entry.explanation_text
        with open(self.resolve(entry.explanation), "r", encoding="utf-8") as fh:
            return fh.read()


def _valid_split(split) -> bool:
    if split in SPLITS:
        return True
    return isinstance(split, str) and split.startswith("extra:") and len(split) > len("extra:")


def _entry_from_json(obj, idx: int) -> ManifestEntry:
    if not isinstance(obj, dict):
        raise ManifestError(f"entry {idx}: not an object")
    allowed = {"image", "label", "split", "explanation", "explanation_text"}
    extra = set(obj) - allowed
    if extra:
        raise ManifestError(f"entry {idx}: unknown keys {sorted(extra)}")
    for key in ("image", "label", "split"):
        if key not in obj:
            raise ManifestError(f"entry {idx}: missing {key!r}")
    if not isinstance(obj["image"], str) or not obj["image"]:
        raise ManifestError(f"entry {idx}: image must be a nonempty path")
    if obj["label"] not in (0, 1):
        raise ManifestError(f"entry {idx}: label must be 0 or 1, got {obj['label']!r}")
    if not _valid_split(obj["split"]):
        raise ManifestError(f"entry {idx}: bad split {obj['split']!r}")
    has_path = "explanation" in obj
    has_text = "explanation_text" in obj
    if has_path == has_text:
        raise ManifestError(f"entry {idx}: need exactly one of explanation / explanation_text")
    if has_path and (not isinstance(obj["explanation"], str) or not obj["explanation"]):
        raise ManifestError(f"entry {idx}: explanation must be a nonempty path")
    if has_text and not isinstance(obj["explanation_text"], str):
        raise ManifestError(f"entry {idx}: explanation_text must be a string")
    return ManifestEntry(
        image=obj["image"],
        label=int(obj["label"]),
        split=obj["split"],
        explanation=obj.get("explanation"),
        explanation_text=obj.get("explanation_text"),
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ManifestError(f"no such manifest: {path}") from exc
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or obj.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: expected format {MANIFEST_FORMAT!r}")
    extra = set(obj) - {"format", "grid_n", "provider", "entries"}
    if extra:
        raise ManifestError(f"{path}: unknown keys {sorted(extra)}")
    grid_n = obj.get("grid_n")
    if not isinstance(grid_n, int) or grid_n < 1:
        raise ManifestError(f"{path}: grid_n must be a positive integer")
    provider = ProviderConfig.from_json(obj.get("provider", {}))
    raw_entries = obj.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError(f"{path}: entries must be a nonempty list")
    entries = [_entry_from_json(e, i) for i, e in enumerate(raw_entries)]
    seen = set()
    for e in entries:
        if e.image in seen:
            raise ManifestError(f"duplicate image path {e.image!r}")
        seen.add(e.image)
    manifest = DatasetManifest(grid_n=grid_n, provider=provider, entries=entries, root=path.parent)
    for e in entries:
        if not manifest.resolve(e.image).is_file():
            raise ManifestError(f"missing image asset: {e.image}")
        if e.explanation is not None and not manifest.resolve(e.explanation).is_file():
            raise ManifestError(f"missing explanation asset: {e.explanation}")
    return manifest


def manifest_to_json(manifest: DatasetManifest) -> dict:
    entries = []
    for e in manifest.entries:
        obj = {"image": e.image, "label": e.label, "split": e.split}
        if e.explanation_text is not None:
            obj["explanation_text"] = e.explanation_text
        else:
            obj["explanation"] = e.explanation
        entries.append(obj)
    return {
        "format": MANIFEST_FORMAT,
        "grid_n": manifest.grid_n,
        "provider": manifest.provider.to_json(),
        "entries": entries,
    }


def save_manifest(path, manifest: DatasetManifest) -> None:
    atomic_write_json(path, manifest_to_json(manifest))


# ---------------------------------------------------------------------------
# synthetic dataset

REAL_TEMPLATES = (
    "The lighting across this region is consistent with the rest of the scene.",
    "Surfaces here show uniform texture under consistent lighting.",
    "Shadows in this area fall in one consistent direction.",
    "This region shows smooth gradients and consistent lighting throughout.",
)
FAKE_TEMPLATES = (
    "A fine checkerboard shimmer repeats across this region.",
    "This area carries a gridded high frequency artifact unlike its surroundings.",
    "Pixel level alternation here matches no natural texture.",
    "A synthetic repeating pattern is planted in this region.",
)


@dataclass(frozen=True)
class SynthConfig:
    count: int  # total samples; even, >= 4 (images come in real/fake twins)
    grid_n: int = 4
    seed: int = 0
    artifact_strength: float = 40.0
    side: int = 120
    noise: float = 2.0
    # Fraction of flagged records worded benignly (anchor still points at
    # the planted patch). Keeps text a cue instead of a label oracle; with
    # class-pure wording a trained detector ignores pixels entirely and
    # image-space attacks become no-ops.
    wording_miss_rate: float = 0.4

    def __post_init__(self):
        if self.count < 4:
            raise ValueError("count must be >= 4")
        if self.count % 2 != 0:
            raise ValueError("count must be even: samples are real/fake twins")
        if self.grid_n < 1:
            raise ValueError("grid_n must be >= 1")
        if self.side < self.grid_n or self.side % self.grid_n != 0:
            raise ValueError("side must be a positive multiple of grid_n")
        if self.artifact_strength < 0:
            raise ValueError("artifact_strength must be >= 0")
        if not 0.0 <= self.wording_miss_rate < 1.0:
            raise ValueError("wording_miss_rate must be in [0, 1)")


def _synth_base(rng, side: int, noise: float) -> np.ndarray:
    """Smooth low-frequency cosine gradients plus small seeded noise."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    u, v = xx / side, yy / side
    img = np.empty((side, side, 3))
    waves = []
    for _ in range(2):
        fx, fy = rng.uniform(0.25, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(20.0, 50.0)
        waves.append(amp * np.cos(2 * np.pi * (fx * u + fy * v) + phase))
    for c in range(3):
        offset = rng.uniform(90.0, 165.0)
        w1, w2 = rng.uniform(0.4, 1.0, size=2)
        img[:, :, c] = offset + w1 * waves[0] + w2 * waves[1]
    img += rng.uniform(-noise, noise, size=img.shape)
    return img


def _cells_to_records(cells, templates, rng, miss_templates=None, miss_rate=0.0) -> list:
    """One single-label record per cell; with probability miss_rate the
    sentence comes from miss_templates instead (the anchor stays put, the
    wording plays the cell down)."""
    records = []
    for r, c in sorted(cells):
        pool = templates
        if miss_templates is not None and rng.uniform() < miss_rate:
            pool = miss_templates
        sentence = pool[int(rng.integers(0, len(pool)))]
        records.append(ExplanationRecord(labels=(label_for(r, c),), sentence=sentence))
    return records


def synth_dataset(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Generate paired real/fake samples under out_dir and write a manifest.

    Real images are smooth gradients with benign explanations anchored to
    random patches; each fake twin shares the base image but has a
    checkerboard of amplitude cfg.artifact_strength planted in 1-3 random
    patches, with explanations flagging exactly those patches. A
    wording_miss_rate fraction of the flagged records use benign wording,
    so the text narrows down where to look without giving the class away.
    Twins stay in the same split (80/10/10 by pair). Byte-identical per
    seed.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "explanations").mkdir(parents=True, exist_ok=True)
    n_pairs = cfg.count // 2
    n_train = int(n_pairs * 8 // 10)
    n_val = int(n_pairs // 10)
    if n_train == 0:
        n_train = 1
    cell = cfg.side // cfg.grid_n
    entries = []
    for pair in range(n_pairs):
        rng = np.random.default_rng(np.random.PCG64(seed_from_parts("synth-pair", cfg.seed, pair)))
        base = _synth_base(rng, cfg.side, cfg.noise)

        k_fake = int(rng.integers(1, 4))
        flat = rng.choice(cfg.grid_n * cfg.grid_n, size=min(k_fake, cfg.grid_n * cfg.grid_n), replace=False)
        fake_cells = [(int(f) // cfg.grid_n, int(f) % cfg.grid_n) for f in flat]
        k_real = int(rng.integers(1, 4))
        flat = rng.choice(cfg.grid_n * cfg.grid_n, size=min(k_real, cfg.grid_n * cfg.grid_n), replace=False)
        real_cells = [(int(f) // cfg.grid_n, int(f) % cfg.grid_n) for f in flat]

        yy, xx = np.mgrid[0 : cfg.side, 0 : cfg.side]
        checker = np.where((xx + yy) % 2 == 0, cfg.artifact_strength, -cfg.artifact_strength)
        mask = np.zeros((cfg.side, cfg.side), dtype=bool)
        for r, c in fake_cells:
            mask[r * cell : (r + 1) * cell, c * cell : (c + 1) * cell] = True
        fake = base + (checker * mask)[:, :, None]

        real_records = _cells_to_records(real_cells, REAL_TEMPLATES, rng)
        fake_records = _cells_to_records(
            fake_cells, FAKE_TEMPLATES, rng,
            miss_templates=REAL_TEMPLATES, miss_rate=cfg.wording_miss_rate,
        )

        split = "train" if pair < n_train else ("val" if pair < n_train + n_val else "test")
        for tag, pixels, records, label in (
            ("real", base, real_records, 0),
            ("fake", fake, fake_records, 1),
        ):
            image_rel = f"images/pair{pair:04d}_{tag}.ppm"
            expl_rel = f"explanations/pair{pair:04d}_{tag}.txt"
            save_ppm(RasterImage.from_array(quantize_u8(pixels)), out_dir / image_rel)
            atomic_write_text(out_dir / expl_rel, format_records(records) + "\n")
            entries.append(ManifestEntry(image=image_rel, label=label, split=split, explanation=expl_rel))
    manifest = DatasetManifest(
        grid_n=cfg.grid_n,
        provider=ProviderConfig(kind="toy", seed=cfg.seed),
        entries=entries,
        root=out_dir,
    )
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# graph construction with on-disk caching

def _dep_resolver(manifest: DatasetManifest, provider):
    cfg = manifest.provider
    if cfg.dep_source == "chain":
        def resolve(sentence: str):
            tokens = tokenize(sentence)
            return tokens, chain_dependencies(tokens)

        return resolve, "chain"
    if cfg.dep_source == "fixture":
        if not cfg.dep_fixture:
            raise ManifestError("dep_source 'fixture' requires a dep_fixture path")
        table = load_dep_fixture(manifest.resolve(cfg.dep_fixture))

        def resolve(sentence: str):
            digest = sentence_digest(sentence)
            if digest not in table:
                raise FixtureMissError(f"no dependency parse for sentence digest {digest[:16]}")
            return table[digest]

        return resolve, f"fixture:{cfg.dep_fixture}"
    if cfg.dep_source == "remote":
        if isinstance(provider, RemoteProvider):
            parser = provider
        elif cfg.endpoint:
            parser = RemoteProvider(endpoint=cfg.endpoint)
        else:
            raise ProviderError("dep_source 'remote' requires an endpoint")
        return parser.parse_sentence, f"remote:{parser.endpoint}"
    raise ManifestError(f"unknown dep_source {cfg.dep_source!r}")


def _graph_cache_key(image_digest: bytes, expl_digest: str, grid_n: int, provider_id: str, dep_desc: str) -> str:
    h = hashlib.sha256()
    for part in ("graph-cache/1", image_digest.hex(), expl_digest, str(grid_n), provider_id, dep_desc):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class GraphFactory:
    """Builds DualGraphs for (image, explanation text) pairs with caching.

    One factory pins the provider, dependency source, and cache location
    for a manifest; the robustness suite reuses it to grade perturbed
    copies of an image against the unchanged explanation text.
    """

    def __init__(self, manifest: DatasetManifest, cache_dir=None):
        self.manifest = manifest
        self.grid_n = manifest.grid_n
        self.provider = make_provider(manifest.provider)
        self._resolve_deps, self._dep_desc = _dep_resolver(manifest, self.provider)
        self.cache_dir = Path(cache_dir) if cache_dir is not None else manifest.root / "graph_cache"
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def cache_key(self, image: RasterImage, text: str) -> str:
        return _graph_cache_key(
            patch_digest(image), sentence_digest(text), self.grid_n, self.provider.provider_id, self._dep_desc
        )

    def build_uncached(self, image: RasterImage, text: str, origin: str = "<image>"):
        diagnostics = []
        records, parse_diags = parse_explanations(text, self.grid_n)
        diagnostics.extend(f"{origin}: {d}" for d in parse_diags)
        image_graph = build_image_graph(split_patches(image, self.grid_n), self.provider)
        text_graphs = []
        for rec in records:
            tokens, edges = self._resolve_deps(rec.sentence)
            if not tokens:
                diagnostics.append(f"{origin}: record {rec.labels} has no tokens; skipped")
                continue
            rec = dataclasses.replace(rec, tokens=tuple(tokens))
            rec, attach_diags = attach_dependencies(rec, edges)
            diagnostics.extend(f"{origin}: {d}" for d in attach_diags)
            text_graphs.append(build_text_graph(rec, self.provider))
        return integrate(image_graph, text_graphs), diagnostics

    def for_image(self, image: RasterImage, text: str, origin: str = "<image>"):
        diagnostics = []
        cache_path = self.cache_dir / f"{self.cache_key(image, text)}.json"
        if cache_path.is_file():
            try:
                return deserialize(cache_path.read_bytes()), diagnostics
            except GraphSchemaError:
                diagnostics.append(f"{origin}: invalid cache entry {cache_path.stem[:16]}; rebuilt")
        graph, diags = self.build_uncached(image, text, origin)
        diagnostics.extend(diags)
        atomic_write_bytes(cache_path, serialize(graph))
        return graph, diagnostics

    def for_entry(self, entry: ManifestEntry):
        image = load_image(self.manifest.resolve(entry.image))
        text = self.manifest.explanation_for(entry)
        graph, diagnostics = self.for_image(image, text, origin=entry.image)
        graph.label = entry.label
        return graph, diagnostics


def build_graphs(manifest: DatasetManifest, entries=None, cache_dir=None, workers: int = 1):
    """Build (or load cached) labeled DualGraphs for the given entries.

    Returns (graphs aligned with entries, diagnostics). The cache key is
    the content digest of the image and explanation plus grid size,
    provider identity, and dependency source, so any change invalidates.
    """
    if entries is None:
        entries = manifest.entries
    factory = GraphFactory(manifest, cache_dir=cache_dir)
    if workers <= 1:
        results = [factory.for_entry(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(factory.for_entry, entries))
    graphs = [g for g, _ in results]
    diagnostics = [d for _, diags in results for d in diags]
    return graphs, diagnostics


def _feature_dim(graphs) -> int:
    dims = {g.feature_matrix().shape[1] for g in graphs}
    if len(dims) != 1:
        raise DataError(f"graphs disagree on feature dimension: {sorted(dims)}")
    return dims.pop()


# ---------------------------------------------------------------------------
# metrics

def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> dict:
    """accuracy/precision/recall/f1 with zero denominators mapped to 0."""
    for name, v in (("tp", tp), ("fp", fp), ("tn", tn), ("fn", fn)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


@dataclass
class MetricsReport:
    split: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    # breakdown name conventions: "perturb:<spec>" rows gate tau_r,
    # "extra:<name>" rows gate tau_g
    breakdowns: dict = field(default_factory=dict)
    tau_r: float | None = None
    tau_g: float | None = None
    tau_r_pass: bool | None = None
    tau_g_pass: bool | None = None

    @classmethod
    def from_counts(cls, split: str, tp: int, fp: int, tn: int, fn: int) -> "MetricsReport":
        return cls(split=split, tp=tp, fp=fp, tn=tn, fn=fn, **metrics_from_counts(tp, fp, tn, fn))

    def add_breakdown(self, name: str, tp: int, fp: int, tn: int, fn: int) -> None:
        self.breakdowns[name] = {"tp": tp, "fp": fp, "tn": tn, "fn": fn, **metrics_from_counts(tp, fp, tn, fn)}

    def apply_thresholds(self, tau_r: float | None = None, tau_g: float | None = None) -> None:
        """tau_r gates the worst perturbation accuracy, tau_g the worst
        extra-split accuracy; either falls back to the main accuracy when
        no matching breakdown exists."""
        if tau_r is not None:
            accs = [b["accuracy"] for n, b in self.breakdowns.items() if n.startswith("perturb:")]
            self.tau_r = tau_r
            self.tau_r_pass = min(accs, default=self.accuracy) >= tau_r
        if tau_g is not None:
            accs = [b["accuracy"] for n, b in self.breakdowns.items() if n.startswith("extra:")]
            if self.split.startswith("extra:"):
                accs.append(self.accuracy)
            self.tau_g = tau_g
            self.tau_g_pass = min(accs, default=self.accuracy) >= tau_g

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "counts": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "metrics": {
                "accuracy": self.accuracy,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
            },
            "breakdowns": self.breakdowns,
            "thresholds": {
                "tau_r": self.tau_r,
                "tau_g": self.tau_g,
                "tau_r_pass": self.tau_r_pass,
                "tau_g_pass": self.tau_g_pass,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        try:
            counts = obj["counts"]
            report = cls.from_counts(obj["split"], counts["tp"], counts["fp"], counts["tn"], counts["fn"])
            for key, want in obj["metrics"].items():
                got = getattr(report, key)
                if abs(got - want) > 1e-9:
                    raise DataError(f"report metric {key} does not match its counts")
            report.breakdowns = dict(obj.get("breakdowns", {}))
            th = obj.get("thresholds", {})
            report.tau_r = th.get("tau_r")
            report.tau_g = th.get("tau_g")
            report.tau_r_pass = th.get("tau_r_pass")
            report.tau_g_pass = th.get("tau_g_pass")
            return report
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed metrics report: {exc}") from exc


def save_report(path, report: MetricsReport) -> None:
    atomic_write_json(path, report.to_json())


# ---------------------------------------------------------------------------
# training and evaluation

@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    val_f1: float


HISTORY_HEADER = "epoch,lr,train_loss,val_acc,val_f1"


def history_csv(history) -> str:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(
            f"{row.epoch},{float(row.lr)!r},{float(row.train_loss)!r},{float(row.val_acc)!r},{float(row.val_f1)!r}"
        )
    return "\n".join(lines) + "\n"


def read_history(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != HISTORY_HEADER:
        raise DataError(f"{path}: not a history CSV")
    rows = []
    for line in lines[1:]:
        epoch, lr, loss, acc, f1 = line.split(",")
        rows.append(HistoryRow(int(epoch), float(lr), float(loss), float(acc), float(f1)))
    return rows


@dataclass
class TrainResult:
    best: ModelParams
    final: ModelParams
    history: list
    best_epoch: int | None
    best_val_f1: float


def _clone_model(model: ModelParams) -> ModelParams:
    return ModelParams(
        config=model.config,
        params={k: v.copy() for k, v in model.params.items()},
        running={k: v.copy() for k, v in model.running.items()},
    )


def count_predictions(model: ModelParams, graphs):
    """Confusion counts (tp, fp, tn, fn) of eval-mode predictions."""
    tp = fp = tn = fn = 0
    for g in graphs:
        logits, _ = forward(model, g, training=False)
        pred = 0 if logits[0] >= logits[1] else 1  # tie goes to label 0
        if g.label == 1:
            tp, fn = (tp + 1, fn) if pred == 1 else (tp, fn + 1)
        else:
            tn, fp = (tn + 1, fp) if pred == 0 else (tn, fp + 1)
    return tp, fp, tn, fn


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig | None = None,
    epochs: int = 40,
    seed: int = 0,
    cache_dir=None,
    workers: int = 1,
    base_lr: float = 1e-3,
    batch_size: int = 16,
    out_dir=None,
) -> TrainResult:
    """Train on the manifest's train split, tracking val F1 for "best".

    Entry order never matters: entries are canonicalized by path and the
    per-epoch order comes from a seeded permutation. Steps run on
    mini-batches (block-diagonal graph batches): batch statistics then
    span many graphs, which keeps batchnorm's running estimates faithful
    to what inference mode sees. With an empty val split the best
    checkpoint is simply the final model. When out_dir is given, writes
    best.vgmd, final.vgmd, and history.csv there.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    train_entries = sorted(manifest.entries_for("train"), key=lambda e: e.image)
    if not train_entries:
        raise DataError("manifest has no train entries")
    val_entries = sorted(manifest.entries_for("val"), key=lambda e: e.image)
    graphs, _ = build_graphs(manifest, train_entries + val_entries, cache_dir=cache_dir, workers=workers)
    train_graphs = graphs[: len(train_entries)]
    val_graphs = graphs[len(train_entries) :]
    dim = _feature_dim(graphs)
    if model_cfg is None:
        model_cfg = ModelConfig(in_dim=dim)
    elif model_cfg.in_dim != dim:
        raise DataError(f"model expects feature dim {model_cfg.in_dim}, graphs have {dim}")

    model = init_model(model_cfg, seed=seed)
    state = adam_init(model.params)
    history = []
    best = None
    best_epoch = None
    best_f1 = -1.0
    for epoch in range(epochs):
        lr = lr_at(epoch, base=base_lr)
        order_rng = np.random.default_rng(np.random.PCG64(seed_from_parts("epoch-order", seed, epoch)))
        order = order_rng.permutation(len(train_graphs))
        losses = []
        for step, start in enumerate(range(0, len(order), batch_size)):
            batch = [train_graphs[i] for i in order[start : start + batch_size]]
            step_seed = seed_from_parts("dropout-step", seed, epoch, step)
            logits, cache = forward(model, batch, training=True, rng_seed=step_seed)
            losses.extend(loss_ce(logits[i], g.label) for i, g in enumerate(batch))
            dlogits = np.stack(
                [loss_ce_grad(logits[i], g.label) for i, g in enumerate(batch)]
            ) / len(batch)
            grads, _ = backward_from_cotangent(model, cache, dlogits)
            adam_step(model.params, grads, state, lr)
        train_loss = float(np.mean(losses))
        if val_graphs:
            counts = count_predictions(model, val_graphs)
            val_metrics = metrics_from_counts(*counts)
            val_acc, val_f1 = val_metrics["accuracy"], val_metrics["f1"]
            if val_f1 > best_f1:
                best_f1, best_epoch, best = val_f1, epoch, _clone_model(model)
        else:
            val_acc = val_f1 = 0.0
        history.append(HistoryRow(epoch=epoch, lr=lr, train_loss=train_loss, val_acc=val_acc, val_f1=val_f1))
    final = _clone_model(model)
    if best is None:
        best, best_epoch, best_f1 = _clone_model(model), None, 0.0
    result = TrainResult(best=best, final=final, history=history, best_epoch=best_epoch, best_val_f1=best_f1)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "best.vgmd", result.best)
        save_checkpoint(out_dir / "final.vgmd", result.final)
        atomic_write_text(out_dir / "history.csv", history_csv(history))
    return result


def evaluate(
    checkpoint,
    manifest: DatasetManifest,
    split: str = "test",
    cache_dir=None,
    workers: int = 1,
    tau_r: float | None = None,
    tau_g: float | None = None,
) -> MetricsReport:
    """Inference-mode metrics over one split; pure given its inputs."""
    model = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    entries = sorted(manifest.entries_for(split), key=lambda e: e.image)
    if not entries:
        raise DataError(f"split {split!r} has no entries")
    graphs, _ = build_graphs(manifest, entries, cache_dir=cache_dir, workers=workers)
    dim = _feature_dim(graphs)
    if model.config.in_dim != dim:
        raise CheckpointError(f"checkpoint expects feature dim {model.config.in_dim}, graphs have {dim}")
    report = MetricsReport.from_counts(split, *count_predictions(model, graphs))
    if tau_r is not None or tau_g is not None:
        report.apply_thresholds(tau_r=tau_r, tau_g=tau_g)
    return report
