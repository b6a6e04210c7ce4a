"""End-to-end helpers shared by the command line and the demos."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import (
    NormStats,
    SimulationRun,
    apply_norm,
    build_windows,
    fit_norm,
    split_runs,
    subsample_runs,
)
from .graph import AdjacencyMatrix, correlation_adjacency
from .metrics import FddReport, evaluate_model
from .models import Model, ModelConfig, TrainConfig, build_model, train

logger = logging.getLogger(__name__)

QUALITY_WINDOW = 10
QUALITY_HIDDEN = 32


@dataclass
class PreparedData:
    train_runs: list[SimulationRun]  # normalised
    test_runs: list[SimulationRun]  # normalised with training statistics
    stats: NormStats
    n_classes: int
    split_seed: int

    @property
    def n_channels(self) -> int:
        return self.stats.mean.size

    def train_windows(self, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
        return build_windows(self.train_runs, window, stride)

    def train_samples(self) -> np.ndarray:
        return np.concatenate([r.samples for r in self.train_runs])


def prepare(runs: Sequence[SimulationRun], split: float = 0.8, split_seed: int = 0,
            train_fraction: float = 1.0, n_classes: int | None = None) -> PreparedData:
    """Split by run, optionally subsample the training runs, then z-normalise."""
    train_raw, test_raw = split_runs(runs, split, split_seed)
    train_raw = subsample_runs(train_raw, train_fraction, split_seed)
    stats = fit_norm(train_raw)
    n_classes = n_classes or 1 + max(r.state_id for r in runs)
    return PreparedData(apply_norm(train_raw, stats), apply_norm(test_raw, stats), stats, n_classes, split_seed)


def fit_model(config: ModelConfig, data: PreparedData, train_config: TrainConfig, stride: int = 5,
              adjacency: AdjacencyMatrix | None = None) -> tuple[Model, list[float]]:
    model = build_model(config, adjacency)
    x, y = data.train_windows(config.window, stride)
    result = train(model, x, y, train_config)
    return model, result.history


def fit_and_evaluate(config: ModelConfig, data: PreparedData, train_config: TrainConfig, stride: int = 5,
                     adjacency: AdjacencyMatrix | None = None, name: str | None = None
                     ) -> tuple[Model, list[float], FddReport]:
    model, history = fit_model(config, data, train_config, stride, adjacency)
    report = evaluate_model(model, data.test_runs, config.window, data.n_classes, name or describe(config))
    return model, history, report


def describe(config: ModelConfig) -> str:
    if config.kind == "gnn":
        return f"GNN({config.hidden}) + {config.variant}"
    if config.kind == "ensemble":
        return f"{config.modules} x (GNN({config.hidden}) + {config.variant})"
    return config.kind.upper()


def graph_quality(adjacency: AdjacencyMatrix, data: PreparedData, train_config: TrainConfig,
                  stride: int = 5, window: int = QUALITY_WINDOW, hidden: int = QUALITY_HIDDEN,
                  threshold: float = 0.3) -> tuple[FddReport, FddReport]:
    """Train the simplified frozen-graph model with ``adjacency`` and with the
    correlation graph of the training data; return both test reports."""
    if adjacency.n_nodes != data.n_channels:
        raise ValueError(f"adjacency has {adjacency.n_nodes} nodes, dataset has {data.n_channels} channels")
    base = ModelConfig(kind="gnn", n_nodes=data.n_channels, window=window, n_classes=data.n_classes,
                       hidden=hidden, variant="imported", seed=train_config.seed)
    corr = correlation_adjacency(data.train_samples(), threshold)
    imported = AdjacencyMatrix(adjacency.weights, "imported", adjacency.top_k)
    _, _, rep_a = fit_and_evaluate(base, data, train_config, stride, imported, name=f"GNN + {adjacency.variant}")
    _, _, rep_c = fit_and_evaluate(replace(base, variant="correlation"), data, train_config, stride, corr,
                                   name="GNN + correlation")
    return rep_a, rep_c
