import copy

import numpy as np
import pytest

from graphdiag import tensor as T
from graphdiag.graph import LEARNED_VARIANTS, AdjacencyMatrix
from graphdiag.models import (
    GcnLayer,
    Linear,
    ModelConfig,
    TrainConfig,
    adjacency_matrices,
    build_model,
    count_parameters,
    gcn_layer_forward,
    load_checkpoint,
    model_forward,
    predict,
    predict_logits,
    save_checkpoint,
    train,
)
from graphdiag.tensor import Tensor

from gradcheck import check_gradients

TOY = dict(n_nodes=4, window=6, hidden=5, n_classes=3, embed_dim=3)


def toy_model(variant="tanh_w", seed=0, **kw):
    cfg = ModelConfig(**{**TOY, "variant": variant, "seed": seed, **kw})
    adjacency = None
    if variant == "imported":
        adjacency = AdjacencyMatrix(np.random.default_rng(seed).uniform(-0.9, 0.9, (4, 4)), "imported")
    return build_model(cfg, adjacency)


def toy_windows(seed, b=8, n=4, m=6):
    return np.random.default_rng(seed).normal(size=(b, n, m))


def widen_learner(model, seed, scale=1.5):
    """Push graph parameters out of the near-zero init so the check exercises curvature.

    GCN biases also leave zero: a dead input row plus a zero bias puts a ReLU
    exactly on its kink, where central differences are not a valid oracle.
    """
    rng = np.random.default_rng(seed + 500)
    for name, p in model.parameters().items():
        if ".graph." in name:
            p.data[...] = rng.normal(0, scale, p.shape)
        elif ".gcn" in name and name.endswith(".b"):
            p.data[...] = rng.normal(0, 0.1, p.shape)


# ---------------------------------------------------------------------------
# GCN layer
# ---------------------------------------------------------------------------


def _layer(w, bias=None):
    layer = GcnLayer(w.shape[0], w.shape[1], np.random.default_rng(0), bias=bias is not None)
    layer.W.data[...] = w
    if bias is not None:
        layer.b.data[...] = bias
    return layer


def test_gcn_identity_case():
    h = np.abs(np.random.default_rng(0).normal(size=(3, 3)))
    out = gcn_layer_forward(_layer(np.eye(3)), np.eye(3), h)
    np.testing.assert_array_equal(out.data, h)


def test_gcn_hand_example():
    out = gcn_layer_forward(_layer(np.eye(2)), np.full((2, 2), 0.5), np.array([[2.0, 0], [0, 2.0]]))
    np.testing.assert_array_equal(out.data, np.ones((2, 2)))


def test_gcn_shape_mismatch():
    with pytest.raises(ValueError):
        gcn_layer_forward(_layer(np.eye(2)), np.eye(3), np.ones((3, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_gcn_gradients(seed):
    rng = np.random.default_rng(seed)
    layer = _layer(rng.normal(size=(4, 2)), rng.normal(size=2))
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    h = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2)))
    params = {"a": a, "h": h, "W": layer.W, "b": layer.b}
    errors = check_gradients(lambda: (gcn_layer_forward(layer, a, h) * w).sum(), params)
    assert max(errors.values()) < 1e-3, errors


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["gnn", "mlp", "cnn1d"])
def test_tep_output_length(kind):
    model = build_model(ModelConfig(kind=kind, hidden=16, seed=1))
    x = np.random.default_rng(0).normal(size=(52, 100))
    assert model_forward(model, x).shape == (29,)


def test_inference_is_deterministic():
    model = toy_model()
    model_forward(model, toy_windows(0), mode="train")  # move running stats off their init
    x = toy_windows(1)
    np.testing.assert_array_equal(model_forward(model, x).data, model_forward(model, x).data)
    np.testing.assert_array_equal(predict_logits(model, x), predict_logits(model, x))


def test_predict_logits_refuses_train_mode():
    with pytest.raises(ValueError):
        predict_logits(toy_model(), toy_windows(0), mode="train")
    with pytest.raises(ValueError):
        model_forward(toy_model(), toy_windows(0), mode="eval")


def test_window_shape_is_checked():
    for kind in ("gnn", "mlp", "cnn1d"):
        model = build_model(ModelConfig(kind=kind, **{k: v for k, v in TOY.items()}, seed=0))
        with pytest.raises(ValueError):
            model_forward(model, np.zeros((2, 5, 6)))


@pytest.mark.parametrize("seed", range(5))
def test_node_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.9, 0.9, (4, 4))
    model = build_model(ModelConfig(**TOY, variant="imported", seed=seed), AdjacencyMatrix(a))
    x = toy_windows(seed, b=3)
    base = model_forward(model, x).data
    for perm in ([1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
        perm = np.array(perm)
        permuted = build_model(ModelConfig(**TOY, variant="imported", seed=seed),
                               AdjacencyMatrix(a[np.ix_(perm, perm)]))
        for name, p in model.parameters().items():
            permuted.parameters()[name].data[...] = p.data
        np.testing.assert_allclose(model_forward(permuted, x[:, perm]).data, base, rtol=1e-12, atol=1e-12)


def test_ensemble_of_one_matches_single_model():
    single = build_model(ModelConfig(**TOY, kind="gnn", seed=3))
    ens = build_model(ModelConfig(**TOY, kind="ensemble", modules=1, seed=3))
    assert count_parameters(single) == count_parameters(ens)
    for (_, p), (_, q) in zip(sorted(single.parameters().items()), sorted(ens.parameters().items())):
        q.data[...] = p.data
    x = toy_windows(2)
    np.testing.assert_array_equal(model_forward(single, x).data, model_forward(ens, x).data)


def test_ensemble_head_width():
    ens = build_model(ModelConfig(kind="ensemble", modules=10, hidden=64, seed=0))
    assert ens.head.W.shape == (640, 29)


@pytest.mark.parametrize("seed", range(3))
def test_ensemble_block_swap(seed):
    model = build_model(ModelConfig(**TOY, kind="ensemble", modules=2, seed=seed))
    widen_learner(model, seed)
    x = toy_windows(seed)
    model_forward(model, x, mode="train")
    base = model_forward(model, x).data
    swapped = copy.deepcopy(model)
    swapped.modules = swapped.modules[::-1]
    h = TOY["hidden"]
    w = swapped.head.W.data.copy()
    swapped.head.W.data[:h], swapped.head.W.data[h:] = w[h:], w[:h]
    np.testing.assert_allclose(model_forward(swapped, x).data, base, rtol=1e-12, atol=1e-12)


def test_zero_weight_mlp_outputs_bias():
    model = build_model(ModelConfig(kind="mlp", **TOY, seed=0))
    for name, p in model.parameters().items():
        if name.endswith(".W"):
            p.data[...] = 0
    np.testing.assert_array_equal(predict_logits(model, toy_windows(0)), np.tile(model.out.b.data, (8, 1)))


def test_cnn_time_axis_after_pooling():
    model = build_model(ModelConfig(kind="cnn1d", seed=0))
    h = model.features(Tensor(np.zeros((1, 52, 100))))
    assert h.shape == (1, 64, 25)


@pytest.mark.parametrize("variant", LEARNED_VARIANTS)
def test_no_nan_for_50_seeds(variant):
    for seed in range(50):
        model = toy_model(variant, seed)
        widen_learner(model, seed, scale=3.0)
        x = toy_windows(seed) * 10
        assert np.isfinite(model_forward(model, x, mode="train").data).all()
        assert np.isfinite(predict_logits(model, x)).all()


def test_head_perturbation_leaves_adjacency():
    model = toy_model("directed", 1)
    before = adjacency_matrices(model)[0].weights.copy()
    x = toy_windows(0)
    logits = predict_logits(model, x)
    model.head.W.data += 0.5
    assert not np.allclose(predict_logits(model, x), logits)
    np.testing.assert_array_equal(adjacency_matrices(model)[0].weights, before)


# ---------------------------------------------------------------------------
# end-to-end gradient check
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", LEARNED_VARIANTS + ("imported",))
@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradients(variant, seed):
    model = toy_model(variant, seed)
    widen_learner(model, seed, scale=1.0)
    x = toy_windows(seed, b=5)
    labels = np.random.default_rng(seed).integers(0, 3, 5)
    errors = check_gradients(lambda: T.softmax_cross_entropy(model.forward(Tensor(x), True), labels),
                             model.parameters())
    assert max(errors.values()) < 1e-3, {k: v for k, v in errors.items() if v >= 1e-3}


@pytest.mark.parametrize("seed", range(5))
def test_ensemble_gradients(seed):
    model = build_model(ModelConfig(**TOY, kind="ensemble", modules=2, seed=seed))
    x = toy_windows(seed, b=4)
    labels = np.array([0, 1, 2, 1])
    errors = check_gradients(lambda: T.softmax_cross_entropy(model.forward(Tensor(x), True), labels),
                             model.parameters())
    assert max(errors.values()) < 1e-3


@pytest.mark.parametrize("kind", ["mlp", "cnn1d"])
def test_baseline_gradients(kind):
    model = build_model(ModelConfig(kind=kind, n_nodes=3, window=8, n_classes=3, mlp_hidden=(5, 4),
                                    cnn_channels=(2, 3), kernel=3, seed=0))
    x = toy_windows(0, b=3, n=3, m=8)
    errors = check_gradients(lambda: T.softmax_cross_entropy(model.forward(Tensor(x), True), [0, 1, 2]),
                             model.parameters())
    assert max(errors.values()) < 1e-3


# ---------------------------------------------------------------------------
# parameter budgets
# ---------------------------------------------------------------------------


def test_single_dense_layer_count():
    assert count_parameters(Linear(5200, 29, np.random.default_rng(0)).parameters()) == 150_829


def test_tep_parameter_budgets():
    single = count_parameters(build_model(ModelConfig(variant="tanh_w")))
    ensemble = count_parameters(build_model(ModelConfig(kind="ensemble", modules=10, hidden=64)))
    assert abs(single - 1_185_661) <= 0.02 * 1_185_661
    assert abs(ensemble - 153_949) <= 0.05 * 153_949
    assert ensemble < 0.2 * single


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def four_class_toy(seed, n=200):
    """Each class shifts a different node, so a GNN can separate them."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 4
    x = rng.normal(size=(n, 4, 6))
    x[np.arange(n), y] += 1.5
    return x, y


def test_training_descends_in_19_of_20_seeds():
    wins = 0
    for seed in range(20):
        x, y = four_class_toy(seed)
        model = build_model(ModelConfig(n_nodes=4, window=6, hidden=8, n_classes=4, seed=seed))
        hist = train(model, x, y, TrainConfig(epochs=5, lr=0.01, batch_size=32, seed=seed)).history
        wins += hist[-1] < hist[0]
    assert wins >= 19


def test_zero_learning_rate_keeps_parameters():
    x, y = four_class_toy(0, 64)
    model = build_model(ModelConfig(n_nodes=4, window=6, hidden=8, n_classes=4, seed=0))
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    train(model, x, y, TrainConfig(epochs=2, lr=0.0, batch_size=16))
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_training_is_deterministic():
    x, y = four_class_toy(1, 96)
    runs = []
    for _ in range(2):
        model = build_model(ModelConfig(n_nodes=4, window=6, hidden=8, n_classes=4, variant="directed",
                                        embed_dim=3, seed=5))
        runs.append((train(model, x, y, TrainConfig(epochs=3, lr=0.01, batch_size=16, seed=2)).history,
                     predict_logits(model, x)))
    assert runs[0][0] == runs[1][0]
    np.testing.assert_array_equal(runs[0][1], runs[1][1])


def test_training_rejects_bad_datasets():
    model = toy_model()
    with pytest.raises(ValueError):
        train(model, np.zeros((0, 4, 6)), np.zeros(0))
    with pytest.raises(ValueError):
        train(model, np.zeros((3, 4, 6)), np.zeros(2))


def test_frozen_adjacency_survives_training():
    a = AdjacencyMatrix(np.random.default_rng(0).uniform(-1, 1, (4, 4)) * 0.5)
    cfg = ModelConfig(n_nodes=4, window=10, hidden=32, n_classes=4, variant="imported", seed=0)
    model = build_model(cfg, a)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(64, 4, 10)), rng.integers(0, 4, 64)
    stored = adjacency_matrices(model)[0].weights.copy()
    weights = {k: v.data.copy() for k, v in model.parameters().items()}
    train(model, x, y, TrainConfig(epochs=2, lr=0.01, batch_size=16))
    np.testing.assert_array_equal(adjacency_matrices(model)[0].weights, stored)
    assert not any("graph" in k for k in weights)
    assert any(not np.array_equal(v.data, weights[k]) for k, v in model.parameters().items())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("kind,variant", [("gnn", "tanh_w"), ("gnn", "uni_directed"), ("ensemble", "relu_w"),
                                          ("gnn", "imported"), ("mlp", "tanh_w"), ("cnn1d", "tanh_w")])
def test_checkpoint_round_trip(tmp_path, kind, variant):
    cfg = ModelConfig(kind=kind, **TOY, variant=variant, modules=2 if kind == "ensemble" else 1, seed=4)
    adjacency = AdjacencyMatrix(np.eye(4) * 0.3) if variant == "imported" else None
    model = build_model(cfg, adjacency)
    x = toy_windows(0)
    model_forward(model, x, mode="train")
    save_checkpoint(model, tmp_path / "m.json", {"note": 1})
    loaded, extra = load_checkpoint(tmp_path / "m.json")
    assert extra == {"note": 1}
    np.testing.assert_array_equal(predict_logits(loaded, x), predict_logits(model, x))
    np.testing.assert_array_equal(predict(loaded, x), predict(model, x))


def test_checkpoint_version_is_checked(tmp_path):
    import json

    save_checkpoint(toy_model(), tmp_path / "m.json")
    obj = json.loads((tmp_path / "m.json").read_text())
    assert obj["version"] == "graphdiag-v1" and obj["seed"] == 0
    obj["version"] = "other"
    (tmp_path / "m.json").write_text(json.dumps(obj))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.json")


def test_baselines_have_no_adjacency():
    with pytest.raises(ValueError):
        adjacency_matrices(build_model(ModelConfig(kind="mlp", **TOY)))


def test_fixed_variant_needs_matching_matrix():
    with pytest.raises(ValueError):
        build_model(ModelConfig(**TOY, variant="imported"))
    with pytest.raises(ValueError):
        build_model(ModelConfig(**TOY, variant="imported"), AdjacencyMatrix(np.eye(3)))
