"""Adjacency matrices over sensor nodes: learned, correlation-based or imported.

Five trainable constructions are provided:

``relu_w``        ReLU(W)
``uni_directed``  ReLU(tanh(a (M1 M2^T - M2 M1^T)))
``undirected``    ReLU(tanh(a M1 M1^T))
``directed``      ReLU(tanh(a M1 M2^T))
``tanh_w``        tanh(a W)

with node embeddings ``Mi = tanh(a (Ei Thi + bi))``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

LEARNED_VARIANTS = ("relu_w", "uni_directed", "undirected", "directed", "tanh_w")
VARIANTS = LEARNED_VARIANTS + ("correlation", "imported")
NONNEGATIVE = {"relu_w", "uni_directed", "undirected", "directed", "correlation"}

_PARAMS_FOR = {
    "relu_w": ("W",),
    "tanh_w": ("W",),
    "undirected": ("E1", "Theta1", "b1"),
    "directed": ("E1", "Theta1", "b1", "E2", "Theta2", "b2"),
    "uni_directed": ("E1", "Theta1", "b1", "E2", "Theta2", "b2"),
}


class GraphConfigError(ValueError):
    pass


@dataclass
class AdjacencyMatrix:
    weights: np.ndarray
    variant: str = "imported"
    top_k: int | None = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != self.weights.shape[1]:
            raise ValueError(f"adjacency must be square, got shape {self.weights.shape}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown adjacency variant {self.variant!r}")

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    def check_invariants(self) -> None:
        """Raise ``AssertionError`` if a variant-specific property is violated."""
        w = self.weights
        assert np.isfinite(w).all(), "non-finite weights"
        if self.variant == "undirected" and self.top_k is None:
            # per-row top-k selection is not symmetric in general
            assert np.abs(w - w.T).max(initial=0.0) <= 1e-9, "undirected matrix is not symmetric"
        if self.variant == "uni_directed":
            assert not np.any((w > 0) & (w.T > 0)), "edge present in both directions"
            assert np.all(np.diag(w) == 0), "non-zero diagonal"
        if self.variant in NONNEGATIVE:
            assert np.all(w >= 0), "negative weight in a non-negative variant"
        if self.variant == "tanh_w":
            assert np.all(np.abs(w) < 1), "tanh_w weight outside (-1, 1)"
        if self.top_k is not None:
            assert np.all((w != 0).sum(axis=1) <= self.top_k), "row exceeds top-k edge limit"

    # -- serialisation ----------------------------------------------------
    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n_nodes,
                "variant": self.variant,
                "top_k": self.top_k,
                "weights": self.weights.reshape(-1).tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "AdjacencyMatrix":
        obj = json.loads(text)
        n = int(obj["n"])
        weights = np.asarray(obj["weights"], dtype=np.float64)
        if weights.size != n * n:
            raise ValueError(f"expected {n * n} weights for n={n}, got {weights.size}")
        return cls(weights.reshape(n, n), obj.get("variant", "imported"), obj.get("top_k"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for row in self.weights:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, variant: str = "imported") -> "AdjacencyMatrix":
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        n = len(rows)
        for i, r in enumerate(rows, start=1):
            if len(r) != n:
                raise ValueError(f"line {i}: expected {n} values, got {len(r)}")
        return cls(np.array([[float(v) for v in r] for r in rows]), variant)

    @classmethod
    def load(cls, path) -> "AdjacencyMatrix":
        path = Path(path)
        text = path.read_text()
        return cls.from_json(text) if path.suffix.lower() == ".json" else cls.from_csv(text)


# ---------------------------------------------------------------------------
# learned constructions
# ---------------------------------------------------------------------------


@dataclass
class GraphLearnParams:
    """Trainable parameters of a graph structure learning layer.

    Only the tensors required by ``variant`` are allocated: a full ``W`` for
    ``relu_w`` / ``tanh_w``, or embeddings ``E [N, d]`` with a biased
    projection ``Theta [d, d]`` for the embedding-based variants.
    """

    variant: str
    n_nodes: int
    alpha: float = 0.1
    embed_dim: int = 100
    top_k: int | None = None
    seed: int = 0
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in LEARNED_VARIANTS:
            raise GraphConfigError(f"variant must be one of {LEARNED_VARIANTS}, got {self.variant!r}")
        if not self.alpha > 0:
            raise GraphConfigError(f"alpha must be positive, got {self.alpha}")
        if self.top_k is not None and self.top_k < 1:
            raise GraphConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not self.tensors:
            self.tensors = self._init(np.random.default_rng(self.seed))

    def _init(self, rng: np.random.Generator) -> dict[str, Tensor]:
        n, d = self.n_nodes, self.embed_dim
        shapes = {"W": (n, n), "E1": (n, d), "E2": (n, d), "Theta1": (d, d), "Theta2": (d, d), "b1": (d,), "b2": (d,)}
        out = {}
        for name in _PARAMS_FOR[self.variant]:
            # small init keeps tanh(alpha * .) away from saturation
            data = np.zeros(shapes[name]) if name.startswith("b") else rng.uniform(-0.1, 0.1, shapes[name])
            out[name] = Tensor(data, requires_grad=True, name=f"graph.{name}")
        return out

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)


def embed_nodes(e: Tensor, theta: Tensor, bias: Tensor, alpha: float) -> Tensor:
    return T.tanh((e @ theta + bias) * alpha)


def adjacency_from_embeddings(variant: str, m1: Tensor, m2: Tensor | None, alpha: float) -> Tensor:
    if variant == "undirected":
        return T.relu(T.tanh((m1 @ m1.T) * alpha))
    if m2 is None:
        raise GraphConfigError(f"{variant} needs a second embedding")
    if variant == "directed":
        return T.relu(T.tanh((m1 @ m2.T) * alpha))
    if variant == "uni_directed":
        # M2 M1^T == (M1 M2^T)^T; forming it by transpose keeps antisymmetry exact
        p = m1 @ m2.T
        return T.relu(T.tanh((p - p.T) * alpha))
    raise GraphConfigError(f"{variant} is not an embedding-based variant")


def topk_mask(weights: np.ndarray, k: int, by_abs: bool = False) -> np.ndarray:
    """0/1 mask keeping the ``k`` strongest entries of each row (lowest index wins ties)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_cols = weights.shape[1]
    if k >= n_cols:
        return np.ones_like(weights)
    score = np.abs(weights) if by_abs else weights
    order = np.argsort(-score, axis=1, kind="stable")[:, :k]
    mask = np.zeros_like(weights)
    np.put_along_axis(mask, order, 1.0, axis=1)
    return mask


def build_adjacency(params: GraphLearnParams) -> Tensor:
    """Differentiable adjacency for ``params.variant`` (top-k applied if configured)."""
    missing = [n for n in _PARAMS_FOR[params.variant] if n not in params.tensors]
    if missing:
        raise GraphConfigError(f"{params.variant} is missing parameters {missing}")
    p, alpha = params.tensors, params.alpha
    if params.variant == "relu_w":
        a = T.relu(p["W"])
    elif params.variant == "tanh_w":
        a = T.tanh(p["W"] * alpha)
    else:
        m1 = embed_nodes(p["E1"], p["Theta1"], p["b1"], alpha)
        m2 = embed_nodes(p["E2"], p["Theta2"], p["b2"], alpha) if "E2" in p else None
        a = adjacency_from_embeddings(params.variant, m1, m2, alpha)
    if params.top_k is not None:
        # selection is treated as constant: gradients reach retained entries only
        a = a * topk_mask(a.data, params.top_k, by_abs=params.variant == "tanh_w")
    return a


def topk_sparsify(a: AdjacencyMatrix, k: int) -> AdjacencyMatrix:
    mask = topk_mask(a.weights, k, by_abs=a.variant == "tanh_w")
    return AdjacencyMatrix(a.weights * mask, a.variant, k)


def correlation_adjacency(samples: np.ndarray, threshold: float = 0.3) -> AdjacencyMatrix:
    """Thresholded Pearson correlation between channels of ``samples [T, N]``.

    Entries whose signed coefficient falls below ``threshold`` are removed,
    as is the diagonal.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2 or samples.shape[1] < 2:
        raise ValueError(f"need at least 2 samples of at least 2 channels, got shape {samples.shape}")
    std = samples.std(axis=0)
    dead = std == 0
    if dead.any():
        logger.warning("zero-variance channels %s get no correlation edges", np.flatnonzero(dead).tolist())
    centred = samples - samples.mean(axis=0)
    safe = np.where(dead, 1.0, std)
    z = centred / safe
    corr = (z.T @ z) / samples.shape[0]
    corr[dead, :] = 0.0
    corr[:, dead] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    corr[corr < threshold] = 0.0
    np.fill_diagonal(corr, 0.0)
    return AdjacencyMatrix(corr, "correlation")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormalizedAdjacency:
    matrix: Tensor
    degree: np.ndarray


def normalize_adjacency(a) -> NormalizedAdjacency:
    """Symmetric degree normalisation with self-loops.

    Degrees are sums of absolute weights, so signed matrices still give a
    positive degree; for non-negative matrices this is the usual row sum.
    """
    if isinstance(a, AdjacencyMatrix):
        a = Tensor(a.weights)
    a = T.as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    a_tilde = a + np.eye(a.shape[0])
    deg = T.absolute(a_tilde).sum(axis=1)
    # (d_i d_j)^-1/2 in one power keeps hand-checkable cases exact
    scale = (T.reshape(deg, (-1, 1)) * T.reshape(deg, (1, -1))) ** -0.5
    a_hat = a_tilde * scale
    return NormalizedAdjacency(a_hat, deg.data.copy())
