"""GNN fault classifiers, the multi-module ensemble and dense/conv baselines.

All models map a batch of windows ``[B, N, m]`` (N sensors, m time steps)
to class logits ``[B, C]``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import (
    AdjacencyMatrix,
    GraphLearnParams,
    build_adjacency,
    normalize_adjacency,
)
from .io import atomic_write_text
from .optim import Adam
from .tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "graphdiag-v1"
MODEL_KINDS = ("gnn", "ensemble", "mlp", "cnn1d")
FIXED_VARIANTS = ("imported", "correlation")


def _glorot(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"):
        bound = 1.0 / np.sqrt(in_dim)
        self.W = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)), requires_grad=True, name=f"{name}.W")
        self.b = Tensor(rng.uniform(-bound, bound, out_dim), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b

    def parameters(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class GcnLayer:
    """One graph convolution: ``relu(A_hat @ H @ W + b)``."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, name: str = "gcn"):
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError(f"GCN dimensions must be positive, got {in_dim}->{out_dim}")
        self.W = Tensor(_glorot(rng, in_dim, out_dim), requires_grad=True, name=f"{name}.W")
        self.b = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b") if bias else None

    def __call__(self, a_hat: Tensor, h: Tensor) -> Tensor:
        return gcn_layer_forward(self, a_hat, h)

    def parameters(self) -> dict[str, Tensor]:
        out = {"W": self.W}
        if self.b is not None:
            out["b"] = self.b
        return out


def gcn_layer_forward(layer: GcnLayer, a_hat, h) -> Tensor:
    a_hat, h = T.as_tensor(a_hat), T.as_tensor(h)
    n = a_hat.shape[0]
    if h.shape[-2] != n or h.shape[-1] != layer.W.shape[0]:
        raise ValueError(f"GCN input {h.shape} does not fit adjacency {a_hat.shape} and weight {layer.W.shape}")
    z = (a_hat @ h) @ layer.W
    if layer.b is not None:
        z = z + layer.b
    return T.relu(z)


class BatchNorm:
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.gamma = Tensor(np.ones(num_features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(num_features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class ModelConfig:
    kind: str = "gnn"
    n_nodes: int = 52
    window: int = 100
    n_classes: int = 29
    hidden: int = 1024
    variant: str = "tanh_w"  # graph learner variant, or "imported" for a frozen matrix
    alpha: float = 0.1
    embed_dim: int = 100
    top_k: int | None = None
    modules: int = 1
    gcn_bias: bool = True
    norm: str = "node"  # batch-norm statistics per node or per hidden feature
    mlp_hidden: tuple[int, int] = (256, 128)
    cnn_channels: tuple[int, int] = (32, 64)
    kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.norm not in ("node", "feature"):
            raise ValueError(f"norm must be 'node' or 'feature', got {self.norm!r}")
        if min(self.n_nodes, self.window, self.n_classes, self.hidden, self.modules) < 1:
            raise ValueError("model dimensions must be positive")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        self.mlp_hidden = tuple(self.mlp_hidden)
        self.cnn_channels = tuple(self.cnn_channels)


class Model:
    """Shared plumbing: parameter/buffer collection and forward dispatch."""

    config: ModelConfig

    def _children(self) -> dict[str, object]:
        raise NotImplementedError

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, child in self._children().items():
            for name, p in child.parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, child in self._children().items():
            if hasattr(child, "buffers"):
                for name, b in child.buffers().items():
                    out[f"{prefix}.{name}"] = b
        return out

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, training: bool = False) -> Tensor:
        return self.forward(T.as_tensor(x), training)


class GnnTrunk(Model):
    """Graph learner + two GCN layers + batch-normed min read-outs joined by a skip sum.

    Returns the ``[B, hidden]`` graph representation; the classifier head is
    attached by :class:`FddGnnModel` or :class:`EnsembleModel`.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, adjacency: AdjacencyMatrix | None = None,
                 name: str = "trunk"):
        self.config = config
        n, h = config.n_nodes, config.hidden
        if config.variant in FIXED_VARIANTS:
            if adjacency is None:
                raise ValueError(f"variant {config.variant!r} needs a fixed adjacency matrix")
            if adjacency.n_nodes != n:
                raise ValueError(f"adjacency has {adjacency.n_nodes} nodes but the model expects {n}")
            self.learner = None
            self.fixed = adjacency
            self._fixed_hat = normalize_adjacency(adjacency).matrix
        else:
            self.learner = GraphLearnParams(
                config.variant, n, alpha=config.alpha, embed_dim=config.embed_dim, top_k=config.top_k,
                seed=int(rng.integers(2**31)),
            )
            self.fixed = None
            self._fixed_hat = None
        self.gcn1 = GcnLayer(config.window, h, rng, bias=config.gcn_bias, name=f"{name}.gcn1")
        self.gcn2 = GcnLayer(h, h, rng, bias=config.gcn_bias, name=f"{name}.gcn2")
        width = n if config.norm == "node" else h
        self.bn1 = BatchNorm(width, name=f"{name}.bn1")
        self.bn2 = BatchNorm(width, name=f"{name}.bn2")

    def _children(self):
        kids = {"gcn1": self.gcn1, "gcn2": self.gcn2, "bn1": self.bn1, "bn2": self.bn2}
        if self.learner is not None:
            kids = {"graph": self.learner, **kids}
        return kids

    def adjacency_tensor(self) -> Tensor:
        if self.learner is None:
            return Tensor(self.fixed.weights)
        return build_adjacency(self.learner)

    def adjacency(self) -> AdjacencyMatrix:
        if self.learner is None:
            return AdjacencyMatrix(self.fixed.weights.copy(), self.fixed.variant, self.fixed.top_k)
        with T.no_grad():
            a = build_adjacency(self.learner)
        return AdjacencyMatrix(a.data.copy(), self.learner.variant, self.learner.top_k)

    def _norm(self, bn: BatchNorm, h: Tensor, training: bool) -> Tensor:
        b, n, k = h.shape
        if self.config.norm == "node":
            flat = T.reshape(T.transpose(h, (0, 2, 1)), (b * k, n))
            return T.transpose(T.reshape(bn(flat, training), (b, k, n)), (0, 2, 1))
        return T.reshape(bn(T.reshape(h, (b * n, k)), training), (b, n, k))

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (self.config.n_nodes, self.config.window):
            raise ValueError(
                f"expected windows of shape [B, {self.config.n_nodes}, {self.config.window}], got {x.shape}"
            )
        if self._fixed_hat is not None:
            a_hat = self._fixed_hat
        else:
            a_hat = normalize_adjacency(build_adjacency(self.learner)).matrix
        h1 = self.gcn1(a_hat, x)
        r1 = T.reduce_min(self._norm(self.bn1, h1, training), axis=1)
        h2 = self.gcn2(a_hat, h1)
        r2 = T.reduce_min(self._norm(self.bn2, h2, training), axis=1)
        return r1 + r2


class FddGnnModel(Model):
    def __init__(self, config: ModelConfig, adjacency: AdjacencyMatrix | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.trunk = GnnTrunk(config, rng, adjacency, name="trunk")
        self.head = Linear(config.hidden, config.n_classes, rng, name="head")

    def _children(self):
        return {"trunk": self.trunk, "head": self.head}

    @property
    def trunks(self) -> list[GnnTrunk]:
        return [self.trunk]

    def forward(self, x: Tensor, training: bool) -> Tensor:
        return self.head(self.trunk.forward(x, training))


class EnsembleModel(Model):
    """``modules`` independent GNN trunks whose outputs are concatenated into one head."""

    def __init__(self, config: ModelConfig, adjacency: AdjacencyMatrix | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.modules = [GnnTrunk(config, rng, adjacency, name=f"module{i}") for i in range(config.modules)]
        self.head = Linear(config.modules * config.hidden, config.n_classes, rng, name="head")

    def _children(self):
        kids: dict[str, object] = {f"module{i}": m for i, m in enumerate(self.modules)}
        kids["head"] = self.head
        return kids

    @property
    def trunks(self) -> list[GnnTrunk]:
        return list(self.modules)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        feats = [m.forward(x, training) for m in self.modules]
        joined = feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)
        return self.head(joined)


class MlpBaseline(Model):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        h1, h2 = config.mlp_hidden
        self.fc1 = Linear(config.n_nodes * config.window, h1, rng, name="fc1")
        self.fc2 = Linear(h1, h2, rng, name="fc2")
        self.out = Linear(h2, config.n_classes, rng, name="out")

    def _children(self):
        return {"fc1": self.fc1, "fc2": self.fc2, "out": self.out}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        _check_window(x, self.config)
        flat = T.reshape(x, (x.shape[0], -1))
        return self.out(T.relu(self.fc2(T.relu(self.fc1(flat)))))


class _Conv:
    def __init__(self, c_in: int, c_out: int, k: int, rng, name: str):
        fan_in = c_in * k
        bound = 1.0 / np.sqrt(fan_in)
        self.W = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k)), requires_grad=True, name=f"{name}.W")
        self.b = Tensor(rng.uniform(-bound, bound, c_out), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.W, self.b)

    def parameters(self):
        return {"W": self.W, "b": self.b}


class Cnn1dBaseline(Model):
    """Two conv(same) + ReLU + max-pool(2) blocks over time, sensors as channels."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c1, c2 = config.cnn_channels
        self.conv1 = _Conv(config.n_nodes, c1, config.kernel, rng, "conv1")
        self.conv2 = _Conv(c1, c2, config.kernel, rng, "conv2")
        self.pooled_length = config.window // 2 // 2
        if self.pooled_length < 1:
            raise ValueError(f"window {config.window} is too short for two pooling stages")
        self.out = Linear(c2 * self.pooled_length, config.n_classes, rng, name="out")

    def _children(self):
        return {"conv1": self.conv1, "conv2": self.conv2, "out": self.out}

    def features(self, x: Tensor) -> Tensor:
        h = T.max_pool1d(T.relu(self.conv1(x)), 2)
        return T.max_pool1d(T.relu(self.conv2(h)), 2)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        _check_window(x, self.config)
        h = self.features(x)
        return self.out(T.reshape(h, (x.shape[0], -1)))


def _check_window(x: Tensor, config: ModelConfig) -> None:
    if x.ndim != 3 or x.shape[1:] != (config.n_nodes, config.window):
        raise ValueError(f"expected windows of shape [B, {config.n_nodes}, {config.window}], got {x.shape}")


def build_model(config: ModelConfig, adjacency: AdjacencyMatrix | None = None) -> Model:
    if config.kind == "gnn":
        return FddGnnModel(config, adjacency)
    if config.kind == "ensemble":
        return EnsembleModel(config, adjacency)
    if config.kind == "mlp":
        return MlpBaseline(config)
    return Cnn1dBaseline(config)


# ---------------------------------------------------------------------------
# forward helpers
# ---------------------------------------------------------------------------


def model_forward(model: Model, window, mode: str = "infer") -> Tensor:
    """Logits for one window ``[N, m]`` (-> ``[C]``) or a batch ``[B, N, m]`` (-> ``[B, C]``)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = T.as_tensor(window)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    out = model.forward(x, mode == "train")
    return T.reshape(out, (out.shape[-1],)) if single else out


ensemble_forward = model_forward
baseline_forward = model_forward


def predict_logits(model: Model, windows, mode: str = "infer", batch_size: int = 512) -> np.ndarray:
    """Inference-only logits as a numpy array; training mode is refused."""
    if mode != "infer":
        raise ValueError("predict_logits is an inference API; mode must be 'infer'")
    windows = np.asarray(windows, dtype=np.float64)
    single = windows.ndim == 2
    if single:
        windows = windows[None]
    chunks = []
    with T.no_grad():
        for start in range(0, len(windows), batch_size):
            chunks.append(model.forward(Tensor(windows[start : start + batch_size]), False).data)
    if not chunks:
        return np.zeros((0, model.config.n_classes))
    out = np.concatenate(chunks)
    return out[0] if single else out


def predict(model: Model, windows, batch_size: int = 512) -> np.ndarray:
    return np.argmax(predict_logits(model, windows, batch_size=batch_size), axis=-1)


def count_parameters(model) -> int:
    params = model.parameters() if hasattr(model, "parameters") else model
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass
class TrainResult:
    history: list[float] = field(default_factory=list)
    steps: int = 0


def train(model: Model, windows: np.ndarray, labels: np.ndarray, config: TrainConfig = TrainConfig(),
          progress=None) -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy; returns the per-epoch mean loss.

    Shuffling is driven by ``config.seed`` so equal seeds give identical
    histories. A trailing batch of a single window is skipped because batch
    statistics are undefined for it.
    """
    windows = np.asarray(windows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(windows) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(windows) != len(labels):
        raise ValueError(f"{len(windows)} windows but {len(labels)} labels")
    params = list(model.parameters().values())
    opt = Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    for epoch in range(config.epochs):
        order = rng.permutation(len(windows))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = T.softmax_cross_entropy(model.forward(Tensor(windows[idx]), True), labels[idx])
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
            result.steps += 1
        result.history.append(total / max(seen, 1))
        if progress is not None:
            progress(epoch, result.history[-1])
        logger.debug("epoch %d loss %.5f", epoch, result.history[-1])
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _array_entry(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _from_entry(entry: dict) -> np.ndarray:
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def checkpoint_dict(model: Model, extra: dict | None = None) -> dict:
    fixed = None
    trunks = getattr(model, "trunks", [])
    if trunks and trunks[0].fixed is not None:
        fixed = json.loads(trunks[0].fixed.to_json())
    return {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.config.seed,
        "parameters": {k: _array_entry(v.data) for k, v in model.parameters().items()},
        "buffers": {k: _array_entry(v) for k, v in model.buffers().items()},
        "fixed_adjacency": fixed,
        "extra": extra or {},
    }


def model_from_checkpoint(obj: dict) -> Model:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    config = ModelConfig(**obj["config"])
    fixed = obj.get("fixed_adjacency")
    adjacency = AdjacencyMatrix.from_json(json.dumps(fixed)) if fixed else None
    model = build_model(config, adjacency)
    params = model.parameters()
    if set(params) != set(obj["parameters"]):
        raise ValueError("checkpoint parameters do not match the model configuration")
    for name, p in params.items():
        p.data[...] = _from_entry(obj["parameters"][name])
    for name, b in model.buffers().items():
        b[...] = _from_entry(obj["buffers"][name])
    return model


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(model, extra)))


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path) as fh:
        obj = json.load(fh)
    return model_from_checkpoint(obj), obj.get("extra", {})


def adjacency_matrices(model: Model) -> Sequence[AdjacencyMatrix]:
    trunks = getattr(model, "trunks", None)
    if not trunks:
        raise ValueError(f"{type(model).__name__} has no adjacency matrix")
    return [t.adjacency() for t in trunks]
