"""Hand-rolled graph attention classifier.

Three GAT layers with two concatenated heads, each followed by batch
norm, ReLU and dropout; global mean pooling over all nodes feeds a
final linear layer. Both the forward pass and the reverse-mode backward
pass are written out explicitly: there is no autodiff here, every
gradient is derived by hand and checked against finite differences in
the tests.

Parameters live in a flat name -> f64 array dict so the optimizer and
the checkpoint format can treat them uniformly:
    gat{i}.h{k}.W  (hidden, in)     attention-head projection
    gat{i}.h{k}.a  (2*hidden,)      attention vector [a_dst ; a_src]
    bn{i}.gamma / bn{i}.beta        batch-norm affine
    fc.W / fc.b                     final classifier
Running batch-norm statistics are separate non-trainable state
(bn{i}.mean / bn{i}.var).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .rng import seed_from_parts

CHECKPOINT_MAGIC = b"vgmd1"


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    hidden_dim: int = 64  # per attention head
    heads: int = 2
    layers: int = 3
    classes: int = 2
    dropout: float = 0.2
    leaky_slope: float = 0.2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def layer_in_dim(self, i: int) -> int:
        return self.in_dim if i == 0 else self.hidden_dim * self.heads

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        extra = set(obj) - set(cls.__dataclass_fields__)
        if extra:
            raise CheckpointError(f"unknown model config keys: {sorted(extra)}")
        return cls(**obj)


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict  # trainable tensors
    running: dict  # batch-norm running statistics


@dataclass
class TrainState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _glorot(rng, shape):
    fan_in = shape[-1] if len(shape) > 1 else shape[0]
    fan_out = shape[0]
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(np.random.PCG64(seed_from_parts("model-init", seed)))
    width = config.hidden_dim * config.heads
    params, running = {}, {}
    for i in range(config.layers):
        d_in = config.layer_in_dim(i)
        for k in range(config.heads):
            params[f"gat{i}.h{k}.W"] = _glorot(rng, (config.hidden_dim, d_in))
            params[f"gat{i}.h{k}.a"] = _glorot(rng, (2 * config.hidden_dim,))
        params[f"bn{i}.gamma"] = np.ones(width)
        params[f"bn{i}.beta"] = np.zeros(width)
        running[f"bn{i}.mean"] = np.zeros(width)
        running[f"bn{i}.var"] = np.ones(width)
    params["fc.W"] = _glorot(rng, (config.classes, width))
    params["fc.b"] = np.zeros(config.classes)
    return ModelParams(config=config, params=params, running=running)


# ---------------------------------------------------------------------------
# batch structure: one or more graphs stacked block-diagonally

@dataclass
class _Batch:
    x: np.ndarray  # (N, in_dim)
    dst: np.ndarray  # attention pairs, destination node per entry
    src: np.ndarray  # source node per entry (includes self-loops)
    graph_id: np.ndarray  # (N,)
    counts: np.ndarray  # (B,) nodes per graph
    n_graphs: int


def _prepare_raw(items) -> _Batch:
    """items: list of (features (n, d), undirected index pairs)."""
    xs, dsts, srcs, gids, counts = [], [], [], [], []
    offset = 0
    for gi, (features, pairs) in enumerate(items):
        features = np.asarray(features, dtype=np.float64)
        n = features.shape[0]
        if n == 0:
            raise ValueError("cannot run the model on an empty graph")
        xs.append(features)
        nbrs = [[i] for i in range(n)]
        for a, b in pairs:
            nbrs[a].append(b)
            nbrs[b].append(a)
        for i, row in enumerate(nbrs):
            dsts.extend([offset + i] * len(row))
            srcs.extend(offset + j for j in row)
        gids.extend([gi] * n)
        counts.append(n)
        offset += n
    return _Batch(
        x=np.concatenate(xs, axis=0),
        dst=np.asarray(dsts, dtype=np.int64),
        src=np.asarray(srcs, dtype=np.int64),
        graph_id=np.asarray(gids, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.int64),
        n_graphs=len(items),
    )


def _prepare(graphs) -> _Batch:
    return _prepare_raw([(g.feature_matrix(), [(e.a, e.b) for e in g.edges]) for g in graphs])


def _segment_softmax(e, dst, n):
    m = np.full(n, -np.inf)
    np.maximum.at(m, dst, e)
    ex = np.exp(e - m[dst])
    denom = np.zeros(n)
    np.add.at(denom, dst, ex)
    return ex / denom[dst]


def _bn_forward(h, gamma, beta, running_mean, running_var, training, momentum, eps):
    """Batch norm over the node axis; returns (out, cache, new running stats).

    Biased variance is used both for normalization and for the running
    update, matching the backward derivation.
    """
    if training:
        mu = h.mean(axis=0)
        var = h.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (h - mu) * inv
        new_mean = (1 - momentum) * running_mean + momentum * mu
        new_var = (1 - momentum) * running_var + momentum * var
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (h - running_mean) * inv
        new_mean, new_var = running_mean, running_var
    return gamma * xhat + beta, (xhat, inv), (new_mean, new_var)


def _bn_backward(dout, gamma, bn_cache, training):
    xhat, inv = bn_cache
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = np.sum(dout, axis=0)
    dxhat = dout * gamma
    if training:
        n = xhat.shape[0]
        dh = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dh = dxhat * inv
    return dh, dgamma, dbeta


def _gat_head(x, batch, W, a, slope):
    hidden = W.shape[0]
    z = x @ W.T
    s_dst = z @ a[:hidden]
    s_src = z @ a[hidden:]
    pre = s_dst[batch.dst] + s_src[batch.src]
    e = np.where(pre >= 0, pre, slope * pre)
    alpha = _segment_softmax(e, batch.dst, x.shape[0])
    out = np.zeros((x.shape[0], hidden))
    np.add.at(out, batch.dst, alpha[:, None] * z[batch.src])
    return out, {"z": z, "pre": pre, "alpha": alpha}


def _gat_head_backward(dout, x, batch, W, a, slope, cache):
    hidden = W.shape[0]
    z, pre, alpha = cache["z"], cache["pre"], cache["alpha"]
    n = x.shape[0]
    # aggregation: out_i = sum_j alpha_ij z_j
    dalpha = np.sum(dout[batch.dst] * z[batch.src], axis=1)
    dz = np.zeros_like(z)
    np.add.at(dz, batch.src, alpha[:, None] * dout[batch.dst])
    # softmax rows over each destination's neighborhood
    rowsum = np.zeros(n)
    np.add.at(rowsum, batch.dst, alpha * dalpha)
    de = alpha * (dalpha - rowsum[batch.dst])
    dpre = de * np.where(pre >= 0, 1.0, slope)
    ds_dst = np.zeros(n)
    np.add.at(ds_dst, batch.dst, dpre)
    ds_src = np.zeros(n)
    np.add.at(ds_src, batch.src, dpre)
    da = np.concatenate([z.T @ ds_dst, z.T @ ds_src])
    dz += ds_dst[:, None] * a[None, :hidden] + ds_src[:, None] * a[None, hidden:]
    dW = dz.T @ x
    dx = dz @ W
    return dx, dW, da


def gat_layer(features, edges, heads, slope: float = 0.2) -> np.ndarray:
    """One GAT layer on (features, undirected edge pairs); heads concatenated.

    heads: list of (W, a) tuples. forward() runs the same machinery with
    caching; this entry point exists for direct use and testing.
    """
    batch = _prepare_raw([(features, list(edges))])
    outs = []
    for W, a in heads:
        if W.shape[1] != batch.x.shape[1]:
            raise ValueError(f"weight expects dim {W.shape[1]}, features have {batch.x.shape[1]}")
        out, _ = _gat_head(batch.x, batch, W, a, slope)
        outs.append(out)
    return np.concatenate(outs, axis=1)


def forward(model: ModelParams, graphs, training: bool = False, rng_seed: int = 0):
    """Run the classifier; returns (logits, cache).

    graphs may be one DualGraph or a list (block-diagonal mini-batch).
    Logits are (classes,) for a single graph, (B, classes) for a list.
    """
    single = not isinstance(graphs, (list, tuple))
    batch = _prepare([graphs] if single else list(graphs))
    cfg = model.config
    if batch.x.shape[1] != cfg.in_dim:
        raise ValueError(f"model expects feature dim {cfg.in_dim}, got {batch.x.shape[1]}")
    x = batch.x
    layer_caches = []
    for i in range(cfg.layers):
        head_outs, head_caches = [], []
        for k in range(cfg.heads):
            out, hc = _gat_head(
                x, batch, model.params[f"gat{i}.h{k}.W"], model.params[f"gat{i}.h{k}.a"], cfg.leaky_slope
            )
            head_outs.append(out)
            head_caches.append(hc)
        h = np.concatenate(head_outs, axis=1)
        bn_out, bn_cache, (new_mean, new_var) = _bn_forward(
            h,
            model.params[f"bn{i}.gamma"],
            model.params[f"bn{i}.beta"],
            model.running[f"bn{i}.mean"],
            model.running[f"bn{i}.var"],
            training,
            cfg.bn_momentum,
            cfg.bn_eps,
        )
        if training:
            model.running[f"bn{i}.mean"] = new_mean
            model.running[f"bn{i}.var"] = new_var
        relu_mask = bn_out > 0
        act = bn_out * relu_mask
        if training and cfg.dropout > 0:
            drop_rng = np.random.default_rng(
                np.random.PCG64(seed_from_parts("dropout", rng_seed, i))
            )
            keep = (drop_rng.random(act.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            act = act * keep
        else:
            keep = None
        layer_caches.append(
            {"x_in": x, "heads": head_caches, "bn": bn_cache, "relu_mask": relu_mask, "keep": keep}
        )
        x = act
    pooled = np.zeros((batch.n_graphs, x.shape[1]))
    np.add.at(pooled, batch.graph_id, x)
    pooled /= batch.counts[:, None]
    logits = pooled @ model.params["fc.W"].T + model.params["fc.b"]
    cache = {
        "batch": batch,
        "layers": layer_caches,
        "pooled": pooled,
        "training": training,
        "logits": logits,
    }
    return (logits[0], cache) if single else (logits, cache)


def loss_ce(logits, y: int) -> float:
    """Cross entropy in the stable log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    m = float(np.max(z))
    return m + float(np.log(np.sum(np.exp(z - m)))) - float(z[int(y)])


def loss_ce_grad(logits, y: int) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - np.max(z))
    p /= p.sum()
    p[int(y)] -= 1.0
    return p


def backward_from_cotangent(model: ModelParams, cache: dict, dlogits):
    """Reverse pass from a logits cotangent; returns (grads, dfeatures).

    dlogits is (classes,) for single-graph caches, (B, classes) otherwise.
    grads has one entry per trainable parameter; dfeatures is the
    gradient with respect to the stacked input node features.
    """
    cfg = model.config
    batch = cache["batch"]
    dlogits = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
    if dlogits.shape != (batch.n_graphs, cfg.classes):
        raise ValueError("logits cotangent does not match the cached batch")
    grads = {}
    grads["fc.W"] = dlogits.T @ cache["pooled"]
    grads["fc.b"] = dlogits.sum(axis=0)
    dpooled = dlogits @ model.params["fc.W"]
    dx = dpooled[batch.graph_id] / batch.counts[batch.graph_id][:, None]
    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        if lc["keep"] is not None:
            dx = dx * lc["keep"]
        dbn_out = dx * lc["relu_mask"]
        dh, dgamma, dbeta = _bn_backward(
            dbn_out, model.params[f"bn{i}.gamma"], lc["bn"], cache["training"]
        )
        grads[f"bn{i}.gamma"] = dgamma
        grads[f"bn{i}.beta"] = dbeta
        x_in = lc["x_in"]
        dx = np.zeros_like(x_in)
        for k in range(cfg.heads):
            sl = slice(k * cfg.hidden_dim, (k + 1) * cfg.hidden_dim)
            dxk, dW, da = _gat_head_backward(
                dh[:, sl],
                x_in,
                batch,
                model.params[f"gat{i}.h{k}.W"],
                model.params[f"gat{i}.h{k}.a"],
                cfg.leaky_slope,
                lc["heads"][k],
            )
            grads[f"gat{i}.h{k}.W"] = dW
            grads[f"gat{i}.h{k}.a"] = da
            dx += dxk
    return grads, dx


def backward(model: ModelParams, g, y: int, cache: dict):
    """Gradients of loss_ce(forward(model, g), y) for every parameter.

    The cache must come from forward(model, g) on this same graph;
    a cache built from a different graph is rejected. Also returns the
    gradient with respect to the input node features (used by the
    adversarial attacks).
    """
    batch = cache["batch"]
    feats = g.feature_matrix()
    if (
        batch.n_graphs != 1
        or batch.x.shape != feats.shape
        or not np.array_equal(batch.x, feats)
    ):
        raise ValueError("stale cache: it was not produced by forward() on this graph")
    dlogits = loss_ce_grad(cache["logits"][0], y)
    return backward_from_cotangent(model, cache, dlogits)


def loss_and_grads(model: ModelParams, graph, y: int, training: bool, rng_seed: int = 0):
    """Convenience wrapper: forward, cross entropy, full backward."""
    logits, cache = forward(model, graph, training=training, rng_seed=rng_seed)
    loss = loss_ce(logits, y)
    grads, dfeatures = backward_from_cotangent(model, cache, loss_ce_grad(logits, y))
    return loss, logits, grads, dfeatures


# ---------------------------------------------------------------------------
# optimizer and schedule

def adam_init(params: dict) -> TrainState:
    state = TrainState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: dict, grads: dict, state: TrainState, lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameters")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        mhat = state.m[name] / (1 - b1**state.t)
        vhat = state.v[name] / (1 - b2**state.t)
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)


def lr_at(epoch: int, base: float = 1e-3, decay: float = 0.5, interval: int = 10) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** (epoch // interval)


# ---------------------------------------------------------------------------
# checkpoints: "vgmd1", JSON header + little-endian f64 tensors

def save_checkpoint(path, model: ModelParams) -> None:
    names = sorted(model.params) + sorted(model.running)
    tensors = []
    blobs = []
    for name in names:
        arr = model.params.get(name)
        if arr is None:
            arr = model.running[name]
        arr = np.asarray(arr, dtype=np.float64)
        tensors.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    header = json.dumps(
        {
            "format": "vgmd1",
            "config": model.config.to_json(),
            "running": sorted(model.running),
            "tensors": tensors,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"no such checkpoint: {path}") from exc
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(CHECKPOINT_MAGIC)
    if len(data) < off + 4:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    try:
        header = json.loads(data[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("unreadable checkpoint header") from exc
    off += hlen
    if header.get("format") != "vgmd1":
        raise CheckpointError("unsupported checkpoint format")
    config = ModelConfig.from_json(header["config"])
    running_names = set(header["running"])
    params, running = {}, {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(data):
            raise CheckpointError(f"checkpoint truncated at tensor {spec['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
        (running if spec["name"] in running_names else params)[spec["name"]] = arr
    if off != len(data):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    model = ModelParams(config=config, params=params, running=running)
    want = set(init_model(config, seed=0).params)
    if set(params) != want:
        raise CheckpointError("checkpoint tensor names do not match the architecture")
    return model
