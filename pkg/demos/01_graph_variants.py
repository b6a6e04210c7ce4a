"""Build each learned adjacency variant from random parameters and show its structure.

    python demos/01_graph_variants.py
"""
import numpy as np

from graphdiag.graph import LEARNED_VARIANTS, AdjacencyMatrix, GraphLearnParams, build_adjacency, topk_sparsify
from graphdiag.metrics import node_importance

np.set_printoptions(precision=2, suppress=True)

for variant in LEARNED_VARIANTS:
    params = GraphLearnParams(variant, n_nodes=5, alpha=1.0, embed_dim=4, seed=0)
    rng = np.random.default_rng(1)
    for t in params.tensors.values():
        t.data[...] = rng.normal(0, 1.5, t.shape)
    a = AdjacencyMatrix(build_adjacency(params).data, variant)
    a.check_invariants()
    print(f"--- {variant}: {(a.weights != 0).sum()} non-zero entries")
    print(a.weights)
    print("top-2 per row:")
    print(topk_sparsify(a, 2).weights)
    print("node importance:", node_importance(a))
