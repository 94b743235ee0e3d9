"""Gradient evasion attacks on the image modality and the robustness suite.

Attacks differentiate through the toy embedder only: the classifier loss
is pulled back from the logits to the node features and from there to
the pixels of each patch. Explanation text is held fixed throughout, so
word nodes act as constants; the attack budget buys pixel changes only.

Budgets (epsilon) live in normalized pixel units, i.e. on the [0, 1]
scale where one u8 level is 1/255.
"""

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError, ProviderError
from .fsio import atomic_write_json
from .gnn import (
    ModelParams,
    adam_init,
    adam_step,
    backward_from_cotangent,
    forward,
    load_checkpoint,
    loss_ce,
    loss_ce_grad,
)
from .pipeline import (
    DatasetManifest,
    GraphFactory,
    MetricsReport,
    count_predictions,
    evaluate,
)
from .raster import PerturbationSpec, RasterImage, load_image, parse_label, quantize_u8, transform
from .textgraph import parse_explanations

ROBUSTNESS_FORMAT = "vigtext-robustness/1"
DEFAULT_EPSILONS = (0.0001, 0.001, 0.01)
ATTACK_KINDS = ("fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    """Evasion attack parameters.

    alpha and steps only matter for pgd; alpha defaults to epsilon / 4.
    A zero-budget pgd keeps alpha = 0 since the projection pins the
    iterate to the original image anyway.
    """

    kind: str
    epsilon: float
    alpha: float | None = None
    steps: int = 10

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind: {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1] (normalized pixel units)")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 4.0)
        if self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0):
            raise ValueError("alpha must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")

    def describe(self) -> str:
        if self.kind == "fgsm":
            return f"fgsm(eps={self.epsilon:g})"
        return f"pgd(eps={self.epsilon:g},alpha={self.alpha:g},steps={self.steps})"


def parse_attack(text: str) -> AttackConfig:
    """Parse ``fgsm:eps=0.01`` / ``pgd:eps=0.01,alpha=0.0025,steps=10``."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in ATTACK_KINDS:
        raise ValueError(f"unknown attack kind: {kind!r}")
    params = {}
    if rest.strip():
        for item in rest.split(","):
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError(f"bad attack fragment {item!r}")
            params[key.strip()] = value.strip()
    known = {"eps", "alpha", "steps"}
    if set(params) - known:
        raise ValueError(f"unknown attack params {sorted(set(params) - known)}")
    if "eps" not in params:
        raise ValueError("attack spec needs eps=<budget>")
    return AttackConfig(
        kind=kind,
        epsilon=float(params["eps"]),
        alpha=float(params["alpha"]) if "alpha" in params else None,
        steps=int(params["steps"]) if "steps" in params else 10,
    )


# ---------------------------------------------------------------------------
# pixel gradients through the graph

class DifferentiableGraphBuilder:
    """Classifier loss as a differentiable function of one image's pixels.

    The template graph comes from the standard cached build path, so at
    the original pixels the attack evaluates exactly the production
    graph. Each call replaces the patch-node features with embeddings of
    the current continuous pixels; word nodes and wiring never change.
    Gradients reach pixel space through the embedder's VJP; the
    frequency branch is quantized and contributes zero almost
    everywhere. Not thread-safe: one builder per worker.
    """

    def __init__(self, factory: GraphFactory, image: RasterImage, text: str, label: int, origin: str = "<image>"):
        provider = factory.provider
        if not (hasattr(provider, "node_feature_pixels") and hasattr(provider, "node_feature_vjp")):
            raise ProviderError(
                f"provider {provider.provider_id!r} exposes no pixel gradients; "
                "attacks run through the differentiable toy embedder only"
            )
        self.provider = provider
        self.label = int(label)
        self.height = image.height
        self.width = image.width
        self.grid_n = factory.grid_n
        self.cell_h = image.height // self.grid_n
        self.cell_w = image.width // self.grid_n
        if self.cell_h == 0 or self.cell_w == 0:
            raise DataError(f"{origin}: image smaller than the {self.grid_n}x{self.grid_n} grid")
        template, _ = factory.for_image(image, text, origin=origin)
        self.graph = copy.deepcopy(template)
        self.dim = self.graph.nodes[0].feature.shape[0]
        self._pixels = None

    def _cell(self, arr: np.ndarray, i: int) -> np.ndarray:
        r, c = divmod(i, self.grid_n)
        return arr[r * self.cell_h : (r + 1) * self.cell_h, c * self.cell_w : (c + 1) * self.cell_w]

    def logits_at(self, model: ModelParams, x_norm: np.ndarray):
        """Eval-mode logits at continuous normalized pixels; caches the
        linearization point for pixel_grad."""
        x_norm = np.asarray(x_norm, dtype=np.float64)
        if x_norm.shape != (self.height, self.width, 3):
            raise ValueError(f"expected pixels of shape {(self.height, self.width, 3)}, got {x_norm.shape}")
        pixels = x_norm * 255.0
        for i in range(self.grid_n * self.grid_n):
            feat = self.provider.node_feature_pixels(self._cell(pixels, i))
            row = np.zeros(self.dim)
            row[: feat.shape[0]] = feat
            self.graph.nodes[i].feature = row
        self._pixels = pixels
        return forward(model, self.graph, training=False)

    def pixel_grad(self, model: ModelParams, cache: dict, dlogits: np.ndarray) -> np.ndarray:
        """Pull a logits cotangent back to normalized pixel space."""
        if self._pixels is None:
            raise ValueError("pixel_grad needs a preceding logits_at call")
        _, dfeat = backward_from_cotangent(model, cache, dlogits)
        image_dim = self.provider.image_dim
        dx = np.zeros_like(self._pixels)
        for i in range(self.grid_n * self.grid_n):
            self._cell(dx, i)[...] = self.provider.node_feature_vjp(
                self._cell(self._pixels, i), dfeat[i, :image_dim]
            )
        return dx * 255.0

    def loss_and_grad(self, model: ModelParams, x_norm: np.ndarray):
        """(true-label cross entropy, logits, d loss / d x_norm)."""
        logits, cache = self.logits_at(model, x_norm)
        loss = loss_ce(logits, self.label)
        grad = self.pixel_grad(model, cache, loss_ce_grad(logits, self.label))
        return loss, logits, grad


def fgsm(image: RasterImage, g_builder: DifferentiableGraphBuilder, model: ModelParams, cfg: AttackConfig) -> RasterImage:
    """One signed-gradient step of size epsilon up the true-label loss."""
    if cfg.kind != "fgsm":
        raise ValueError(f"config kind is {cfg.kind!r}, not fgsm")
    x0 = image.to_f64() / 255.0
    _, _, grad = g_builder.loss_and_grad(model, x0)
    x_adv = np.clip(x0 + cfg.epsilon * np.sign(grad), 0.0, 1.0)
    return RasterImage.from_array(quantize_u8(x_adv * 255.0))


def pgd(image: RasterImage, g_builder: DifferentiableGraphBuilder, model: ModelParams, cfg: AttackConfig) -> RasterImage:
    """Iterated signed steps projected onto the L-inf ball around x0."""
    if cfg.kind != "pgd":
        raise ValueError(f"config kind is {cfg.kind!r}, not pgd")
    x0 = image.to_f64() / 255.0
    x = x0
    for _ in range(cfg.steps):
        _, _, grad = g_builder.loss_and_grad(model, x)
        x = np.clip(x + cfg.alpha * np.sign(grad), 0.0, 1.0)
        x = np.clip(x, x0 - cfg.epsilon, x0 + cfg.epsilon)
    return RasterImage.from_array(quantize_u8(x * 255.0))


def run_attack(image: RasterImage, g_builder: DifferentiableGraphBuilder, model: ModelParams, cfg: AttackConfig) -> RasterImage:
    return (fgsm if cfg.kind == "fgsm" else pgd)(image, g_builder, model, cfg)


# ---------------------------------------------------------------------------
# surrogate adversarial loss

def _row_logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def surrogate_adv_loss(logits, y) -> float:
    """Binary cross entropy pushing the real-class probability toward y.

    p is the softmax probability of class 0 (real); y = 1 rewards
    looking real, y = 0 rewards looking fake. Accepts one logits row or
    a batch, averaged; y broadcasts. Stable for any finite logits.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    yv = np.broadcast_to(np.asarray(y, dtype=np.float64), (z.shape[0],))
    lse = _row_logsumexp(z)
    log_p = z[:, 0] - lse
    log_not_p = _row_logsumexp(z[:, 1:]) - lse
    return float(np.mean(-(yv * log_p + (1.0 - yv) * log_not_p)))


def surrogate_adv_loss_grad(logits, y) -> np.ndarray:
    """d surrogate_adv_loss / d logits, shaped like the input."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    yv = np.broadcast_to(np.asarray(y, dtype=np.float64), (z.shape[0],))
    soft = np.exp(z - _row_logsumexp(z)[:, None])
    rest = np.exp(z[:, 1:] - _row_logsumexp(z[:, 1:])[:, None])
    grad = soft.copy()
    grad[:, 0] -= yv
    grad[:, 1:] -= (1.0 - yv)[:, None] * rest
    grad /= z.shape[0]
    return grad if np.asarray(logits).ndim == 2 else grad[0]


# ---------------------------------------------------------------------------
# toy generator attack

@dataclass(frozen=True)
class GeneratorAttackConfig:
    """Knobs for the parametric checkerboard generator.

    init_amplitude must match the artifact strength the dataset was
    generated with for the zero-step identity to hold exactly (and it is
    only byte-exact for integer strengths, where quantization commutes
    with adding the artifact).
    """

    steps: int = 25
    lr: float = 2.0
    split: str = "test"
    init_amplitude: float = 40.0
    target: int = 1  # 1 = look real, matching the evasion goal

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.target not in (0, 1):
            raise ValueError("target must be 0 or 1")


@dataclass(frozen=True)
class GeneratorAttackSample:
    image: str
    loss_before: float
    loss_after: float
    amplitude: float
    phase: float
    evaded: bool
    attacked: RasterImage


@dataclass(frozen=True)
class GeneratorAttackResult:
    samples: tuple
    evasion_rate: float

    def summary_json(self) -> dict:
        return {
            "evasion_rate": self.evasion_rate,
            "samples": [
                {
                    "image": s.image,
                    "loss_before": s.loss_before,
                    "loss_after": s.loss_after,
                    "amplitude": s.amplitude,
                    "phase": s.phase,
                    "evaded": s.evaded,
                }
                for s in self.samples
            ],
        }


def _twin_real_path(image_rel: str) -> str:
    if "_fake" not in image_rel:
        raise DataError(f"{image_rel}: generator attack needs the paired real/fake synthetic layout")
    return image_rel.replace("_fake", "_real")


def _flagged_cells(text: str, grid_n: int, origin: str):
    records, _ = parse_explanations(text, grid_n)
    cells = sorted({parse_label(label) for rec in records for label in rec.labels})
    if not cells:
        raise DataError(f"{origin}: explanation flags no patches to parametrize")
    return cells


def toy_generator_attack(
    surrogate,
    manifest: DatasetManifest,
    cfg: GeneratorAttackConfig = GeneratorAttackConfig(),
    cache_dir=None,
) -> GeneratorAttackResult:
    """Re-synthesize each fake's planted checkerboard with learnable
    amplitude and phase, optimized by Adam against the surrogate.

    Images are regenerated as real_twin + A*cos(pi*(x+y) + phi) on the
    flagged cells. On the integer pixel lattice the phase only enters
    through cos(phi), whose gradient vanishes at the planted phi = 0, so
    in practice evasion is driven by the amplitude decaying. The best
    iterate (lowest surrogate loss, the initial state included) is kept,
    so the per-sample loss never increases. Non-finite losses or
    parameters abort with a diagnostic.
    """
    model = surrogate if isinstance(surrogate, ModelParams) else load_checkpoint(surrogate)
    factory = GraphFactory(manifest, cache_dir=cache_dir)
    fakes = sorted(
        (e for e in manifest.entries_for(cfg.split) if e.label == 1), key=lambda e: e.image
    )
    if not fakes:
        raise DataError(f"split {cfg.split!r} has no fake samples to attack")

    samples = []
    for entry in fakes:
        text = manifest.explanation_for(entry)
        real = load_image(manifest.resolve(_twin_real_path(entry.image)))
        real_f = real.to_f64()
        h, w = real.height, real.width
        cell_h, cell_w = h // manifest.grid_n, w // manifest.grid_n
        yy, xx = np.mgrid[0:h, 0:w]
        unit = np.where((xx + yy) % 2 == 0, 1.0, -1.0)
        mask = np.zeros((h, w))
        for r, c in _flagged_cells(text, manifest.grid_n, entry.image):
            mask[r * cell_h : (r + 1) * cell_h, c * cell_w : (c + 1) * cell_w] = 1.0
        pattern = (unit * mask)[:, :, None]  # same artifact on all three channels

        builder = DifferentiableGraphBuilder(
            factory, load_image(manifest.resolve(entry.image)), text, entry.label, origin=entry.image
        )

        def image_at(amp: float, phase: float) -> np.ndarray:
            # cos(pi*k + phase) == cos(pi*k) * cos(phase) exactly for integer k
            return np.clip(real_f + amp * math.cos(phase) * pattern, 0.0, 255.0)

        params = {"amplitude": np.array([cfg.init_amplitude]), "phase": np.array([0.0])}
        state = adam_init(params)

        def eval_loss():
            x_norm = image_at(float(params["amplitude"][0]), float(params["phase"][0])) / 255.0
            logits, cache = builder.logits_at(model, x_norm)
            return surrogate_adv_loss(logits, cfg.target), logits, cache

        loss, logits, cache = eval_loss()
        loss_before = loss
        best = (loss, float(params["amplitude"][0]), float(params["phase"][0]))
        for step in range(cfg.steps):
            if not np.isfinite(loss):
                raise NumericError(
                    f"{entry.image}: generator attack diverged at step {step} (loss={loss!r})"
                )
            dx = builder.pixel_grad(model, cache, surrogate_adv_loss_grad(logits, cfg.target))
            s = float(np.sum(dx * pattern)) / 255.0
            amp, phase = float(params["amplitude"][0]), float(params["phase"][0])
            grads = {
                "amplitude": np.array([s * math.cos(phase)]),
                "phase": np.array([-s * amp * math.sin(phase)]),
            }
            adam_step(params, grads, state, cfg.lr)
            if not all(np.isfinite(p).all() for p in params.values()):
                raise NumericError(
                    f"{entry.image}: generator attack diverged at step {step + 1} (non-finite parameters)"
                )
            loss, logits, cache = eval_loss()
            if loss < best[0]:
                best = (loss, float(params["amplitude"][0]), float(params["phase"][0]))

        loss_after, amp, phase = best
        attacked = RasterImage.from_array(quantize_u8(image_at(amp, phase)))
        graph, _ = factory.for_image(attacked, text, origin=f"{entry.image} (attacked)")
        adv_logits, _ = forward(model, graph, training=False)
        samples.append(
            GeneratorAttackSample(
                image=entry.image,
                loss_before=loss_before,
                loss_after=loss_after,
                amplitude=amp,
                phase=phase,
                evaded=bool(adv_logits[0] >= adv_logits[1]),
                attacked=attacked,
            )
        )
    rate = sum(s.evaded for s in samples) / len(samples)
    return GeneratorAttackResult(samples=tuple(samples), evasion_rate=rate)


# ---------------------------------------------------------------------------
# robustness suite

@dataclass
class RobustnessRow:
    spec: str
    metrics: MetricsReport
    pass_tau_r: bool | None


@dataclass
class RobustnessReport:
    split: str
    clean: MetricsReport
    rows: list
    tau_r: float | None = None

    def to_json(self) -> dict:
        return {
            "format": ROBUSTNESS_FORMAT,
            "split": self.split,
            "tau_r": self.tau_r,
            "clean": self.clean.to_json(),
            "rows": [
                {"spec": r.spec, "metrics": r.metrics.to_json(), "pass_tau_r": r.pass_tau_r}
                for r in self.rows
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RobustnessReport":
        try:
            if obj["format"] != ROBUSTNESS_FORMAT:
                raise DataError(f"unknown robustness report format {obj.get('format')!r}")
            rows = [
                RobustnessRow(
                    spec=r["spec"],
                    metrics=MetricsReport.from_json(r["metrics"]),
                    pass_tau_r=r["pass_tau_r"],
                )
                for r in obj["rows"]
            ]
            return cls(
                split=obj["split"],
                clean=MetricsReport.from_json(obj["clean"]),
                rows=rows,
                tau_r=obj["tau_r"],
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed robustness report: {exc}") from exc


def save_robustness_report(path, report: RobustnessReport) -> None:
    atomic_write_json(path, report.to_json())


def default_suite_specs(side: int = 120) -> list:
    """The standard spec battery: one of each warp, three resize targets,
    and the default epsilon grid for both attacks."""
    specs = [
        PerturbationSpec.blur(),
        PerturbationSpec.brightness(1.5),
        PerturbationSpec.rotate(),
        PerturbationSpec.scale_translate(),
    ]
    for factor in (0.5, 0.75, 2.0):
        target = max(1, round(side * factor))
        specs.append(PerturbationSpec.resize(target, target))
    specs.extend(AttackConfig("fgsm", eps) for eps in DEFAULT_EPSILONS)
    specs.extend(AttackConfig("pgd", eps) for eps in DEFAULT_EPSILONS)
    return specs


def run_robustness_suite(
    checkpoint,
    manifest: DatasetManifest,
    specs,
    split: str = "test",
    tau_r: float | None = None,
    cache_dir=None,
    workers: int = 1,
) -> RobustnessReport:
    """Evaluate the model on the clean split and on every perturbed or
    attacked variant of it.

    Explanation text is reused verbatim for the perturbed images, so
    only the vision side of each graph changes. The clean report gains a
    "perturb:<spec>" breakdown per row, and tau_r (when given) gates
    each row's accuracy as well as the worst row overall.
    """
    model = checkpoint if isinstance(checkpoint, ModelParams) else load_checkpoint(checkpoint)
    entries = sorted(manifest.entries_for(split), key=lambda e: e.image)
    if not entries:
        raise DataError(f"split {split!r} has no entries")
    factory = GraphFactory(manifest, cache_dir=cache_dir)
    clean = evaluate(model, manifest, split=split, cache_dir=factory.cache_dir, workers=workers)

    def graph_for(entry, spec):
        image = load_image(manifest.resolve(entry.image))
        text = manifest.explanation_for(entry)
        if isinstance(spec, AttackConfig):
            builder = DifferentiableGraphBuilder(factory, image, text, entry.label, origin=entry.image)
            variant = run_attack(image, builder, model, spec)
        else:
            variant = transform(image, spec)
        graph, _ = factory.for_image(variant, text, origin=entry.image)
        graph.label = entry.label
        return graph

    rows = []
    for spec in specs:
        if workers <= 1:
            graphs = [graph_for(e, spec) for e in entries]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                graphs = list(pool.map(lambda e: graph_for(e, spec), entries))
        tp, fp, tn, fn = count_predictions(model, graphs)
        metrics = MetricsReport.from_counts(split, tp, fp, tn, fn)
        clean.add_breakdown(f"perturb:{spec.describe()}", tp, fp, tn, fn)
        if tau_r is not None:
            metrics.apply_thresholds(tau_r=tau_r)
        rows.append(RobustnessRow(spec=spec.describe(), metrics=metrics, pass_tau_r=metrics.tau_r_pass))
    if tau_r is not None:
        clean.apply_thresholds(tau_r=tau_r)
    return RobustnessReport(split=split, clean=clean, rows=rows, tau_r=tau_r)
