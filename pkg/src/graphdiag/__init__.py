"""Graph neural networks with trainable adjacency matrices for fault diagnosis
on multivariate sensor data."""
from .tensor import NumericError, Tensor, backward, no_grad
from .graph import (
    AdjacencyMatrix,
    GraphLearnParams,
    build_adjacency,
    correlation_adjacency,
    normalize_adjacency,
    topk_sparsify,
)
from .models import (
    EnsembleModel,
    FddGnnModel,
    ModelConfig,
    TrainConfig,
    build_model,
    count_parameters,
    model_forward,
    train,
)
from .data import SimulationRun, SynthSpec, generate_synthetic, load_runs_csv
from .metrics import FddReport, evaluate_model, node_importance

__version__ = "0.1.0"

__all__ = [
    "AdjacencyMatrix", "EnsembleModel", "FddGnnModel", "FddReport", "GraphLearnParams", "ModelConfig",
    "NumericError", "SimulationRun", "SynthSpec", "Tensor", "TrainConfig", "backward", "build_adjacency",
    "build_model", "correlation_adjacency", "count_parameters", "evaluate_model", "generate_synthetic",
    "load_runs_csv", "model_forward", "no_grad", "node_importance", "normalize_adjacency", "topk_sparsify",
    "train",
]
