import numpy as np
import pytest

from dgnn import autodiff as ad
from dgnn.autodiff import Tape, Tensor
from dgnn.correction import backward_loss
from dgnn.errors import ShapeError
from dgnn.gin import GIN, GinConfig, LayerParams, Readout, aggregate, combine, readout
from dgnn.graph import Graph, GraphBatch, disjoint_union

from conftest import numerical_grad, random_graph, rel_error

PATH = Graph(3, ((1,), (0, 2), (1,)), np.zeros((3, 1)), 0)


def _param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_aggregate_path_graph():
    out = aggregate(PATH, np.array([[1.0], [2.0], [3.0]]))
    np.testing.assert_array_equal(out.data, [[2], [4], [2]])


def test_aggregate_single_vertex():
    g = Graph(1, ((),), np.ones((1, 2)), 0)
    np.testing.assert_array_equal(aggregate(g, np.array([[5.0, -1.0]])).data, [[0, 0]])


def test_aggregate_shape_error():
    with pytest.raises(ShapeError):
        aggregate(PATH, np.ones((2, 1)))


def test_aggregate_equivariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = random_graph(rng)
        perm = rng.permutation(g.num_vertices)
        h = rng.normal(size=(g.num_vertices, 4))
        h_perm = np.empty_like(h)
        h_perm[perm] = h
        out = aggregate(g, h).data
        out_perm = aggregate(g.permuted(perm), h_perm).data
        np.testing.assert_allclose(out_perm[perm], out, atol=1e-12)


def test_combine_identity_case():
    h = np.abs(np.random.default_rng(0).normal(size=(4, 3)))
    layer = LayerParams([_param(np.eye(3))] * 2, [_param(np.zeros(3))] * 2)
    np.testing.assert_allclose(combine(h, np.zeros_like(h), layer).data, h)


def test_combine_single_layer():
    rng = np.random.default_rng(1)
    h, a, w = np.abs(rng.normal(size=(5, 2))), np.abs(rng.normal(size=(5, 2))), rng.normal(size=(2, 3))
    layer = LayerParams([_param(w)], [_param(np.zeros(3))])
    np.testing.assert_allclose(combine(h, a, layer, eps=0.3).data, (1.3 * h + a) @ w, atol=1e-12)


def test_combine_shape_error():
    layer = LayerParams([_param(np.eye(3))], [_param(np.zeros(3))])
    with pytest.raises(ShapeError):
        combine(np.ones((2, 2)), np.ones((2, 2)), layer)


def test_combine_gradient():
    rng = np.random.default_rng(2)
    h = _param(rng.normal(size=(4, 3)))
    a = _param(rng.normal(size=(4, 3)))
    layer = LayerParams([_param(rng.normal(size=(3, 5))), _param(rng.normal(size=(5, 2)))],
                        [_param(rng.normal(size=5)), _param(rng.normal(size=2))],
                        _param(0.2))
    weights = rng.normal(size=(4, 2))

    def f():
        return float((combine(h, a, layer).data * weights).sum())

    with Tape() as tape:
        loss = (combine(h, a, layer) * weights).sum()
    tape.backward(loss)
    for t in [h, a, layer.eps, *layer.weights, *layer.biases]:
        for i, n in numerical_grad(f, t.data).items():
            assert rel_error(t.grad.reshape(-1)[i], n) < 1e-4


def test_readout_single_vertex():
    g = Graph(1, ((),), np.ones((1, 1)), 0)
    hs = [Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]]))]
    np.testing.assert_array_equal(readout(hs, g, Readout.SUM_LAST).data, [[3, 4]])
    np.testing.assert_array_equal(readout(hs, g).data, [[1, 2, 3, 4]])


@pytest.mark.parametrize("mode", list(Readout))
def test_readout_disjoint_union_additivity(mode):
    rng = np.random.default_rng(4)
    model = GIN(GinConfig(num_layers=3, hidden_dim=8, readout=mode), 3, 2, seed=1)
    for _ in range(10):
        g1, g2 = random_graph(rng), random_graph(rng)
        union = disjoint_union([g1, g2])
        h1, h2, hu = (model.embed(g)[0].data for g in (g1, g2, union))
        np.testing.assert_allclose(hu, h1 + h2, atol=1e-10)


def test_readout_zero_features_without_bias():
    model = GIN(GinConfig(num_layers=2, hidden_dim=4), 3, 2, seed=0)
    for layer in model.layers:
        for b in layer.biases:
            b.data = np.zeros_like(b.data)
    g = Graph(4, ((1,), (0, 2), (1, 3), (2,)), np.zeros((4, 3)), 0)
    np.testing.assert_array_equal(model.embed(g)[0].data, 0.0)


def _trained_like(model, rng):
    model.classifier_w.data = rng.normal(size=model.classifier_w.shape)
    model.classifier_b.data = rng.normal(size=model.classifier_b.shape)
    return model


def test_permutation_invariance():
    rng = np.random.default_rng(5)
    model = _trained_like(GIN(GinConfig(), 3, 3, seed=2), rng)
    for _ in range(30):
        g = random_graph(rng)
        perm = rng.permutation(g.num_vertices)
        np.testing.assert_allclose(model.logits(g.permuted(perm)).data,
                                   model.logits(g).data, rtol=0, atol=1e-9)


def test_untrained_model_is_uniform():
    rng = np.random.default_rng(6)
    model = GIN(GinConfig(), 3, 4, seed=0)
    probs = model.predict_proba([random_graph(rng) for _ in range(10)])
    np.testing.assert_array_equal(probs, 0.25)


def test_softmax_normalized_and_batch_matches_single():
    rng = np.random.default_rng(7)
    model = _trained_like(GIN(GinConfig(hidden_dim=16), 3, 3, seed=3), rng)
    graphs = [random_graph(rng) for _ in range(12)]
    batch = model.predict_proba(graphs)
    np.testing.assert_allclose(batch.sum(axis=1), 1.0, atol=1e-12)
    for g, row in zip(graphs, batch):
        np.testing.assert_allclose(model.forward(g)[1].data[0], row, atol=1e-12)


def test_feature_width_mismatch():
    model = GIN(GinConfig(), 5, 2)
    with pytest.raises(ShapeError):
        model.forward(PATH)


@pytest.mark.parametrize("learn_eps", [False, True])
def test_full_model_gradient(learn_eps):
    rng = np.random.default_rng(8 + learn_eps)
    cfg = GinConfig(num_layers=2, hidden_dim=6, learn_eps=learn_eps)
    model = _trained_like(GIN(cfg, 3, 3, seed=4), rng)
    inverse = np.linalg.inv(np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]]))
    params = model.parameters()
    worst = 0.0
    for _ in range(10):
        batch = GraphBatch([random_graph(rng, label=int(rng.integers(3))) for _ in range(3)])
        labels = [g.label for g in batch.graphs]

        def f():
            return float(ad.tsum(backward_loss(model.forward(batch)[1], labels, inverse)).data)

        ad.zero_grad(params.values())
        with Tape() as tape:
            loss = ad.tsum(backward_loss(model.forward(batch)[1], labels, inverse))
        tape.backward(loss)
        for t in params.values():
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            for i, n in numerical_grad(f, t.data, entries=picks).items():
                worst = max(worst, rel_error(t.grad.reshape(-1)[i], n))
    assert worst < 1e-4, worst


@pytest.mark.parametrize("cfg", [GinConfig(num_layers=2, hidden_dim=5),
                                 GinConfig(num_layers=2, hidden_dim=5, learn_eps=True,
                                           batch_norm=True, readout=Readout.SUM_LAST)])
def test_checkpoint_round_trip(tmp_path, cfg):
    rng = np.random.default_rng(9)
    model = _trained_like(GIN(cfg, 3, 2, seed=5), rng)
    for name, buf in model.buffers().items():
        buf[...] = rng.random(buf.shape)
    model.save(tmp_path / "m.npz")
    back = GIN.load(tmp_path / "m.npz")
    assert back.config == model.config
    for (k, a), (k2, b) in zip(model.parameters().items(), back.parameters().items()):
        assert k == k2 and a.data.tobytes() == b.data.tobytes()
    for k, v in model.buffers().items():
        assert back.buffers()[k].tobytes() == v.tobytes()
    graphs = [random_graph(rng) for _ in range(5)]
    assert model.predict_proba(graphs).tobytes() == back.predict_proba(graphs).tobytes()


def test_copy_is_independent():
    model = GIN(GinConfig(num_layers=1, hidden_dim=2), 1, 2)
    clone = model.copy()
    clone.classifier_w.data += 1.0
    assert np.all(model.classifier_w.data == 0.0)
