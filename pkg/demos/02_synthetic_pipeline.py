"""Generate a synthetic process with a known graph, train a graph model on it,
report detection metrics and check how much of the true graph was recovered.

    python demos/02_synthetic_pipeline.py            # quick settings, under a minute
    python demos/02_synthetic_pipeline.py --full     # the acceptance protocol, about 3 minutes
"""
import argparse

import numpy as np

from graphdiag import ModelConfig, SynthSpec, TrainConfig, generate_synthetic
from graphdiag.metrics import graph_recovery_precision, node_importance, random_recovery_expectation
from graphdiag.models import adjacency_matrices, count_parameters
from graphdiag.pipeline import fit_and_evaluate, prepare

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
epochs, stride = (15, 2) if args.full else (5, 10)

runs, g = generate_synthetic(SynthSpec(seed=7), n_runs_per_state=20)
data = prepare(runs)
print(f"{len(runs)} runs, {data.n_channels} channels, {data.n_classes} states; "
      f"{len(data.train_runs)} train / {len(data.test_runs)} test runs")

config = ModelConfig(kind="gnn", n_nodes=data.n_channels, window=100, n_classes=data.n_classes,
                     hidden=64, variant="tanh_w", seed=0)
model, history, report = fit_and_evaluate(config, data, TrainConfig(epochs=epochs, seed=0), stride)
print(f"{count_parameters(model):,} parameters; loss {history[0]:.3f} -> {history[-1]:.3f}")
print(report.to_text())

learned = adjacency_matrices(model)[0]
k = int((g[~np.eye(len(g), dtype=bool)] != 0).sum())
print(f"graph recovery at k={k}: precision {graph_recovery_precision(learned, g, k):.3f} "
      f"vs random {random_recovery_expectation(g, k):.3f}")
print("learned node importance:", np.round(node_importance(learned), 2))
