import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgnn import autodiff as ad
from dgnn.autodiff import Tape, tensor
from dgnn.correction import (
    CorrectionMatrix,
    Source,
    backward_loss,
    conservative_from_probs,
    cross_entropy,
    cross_entropy_vector,
    estimate_anchor,
    estimate_conservative,
    estimate_exact,
    invert_correction,
    select_anchors,
)
from dgnn.errors import ConfigError, ShapeError, SingularMatrixError
from dgnn.graph import Graph
from dgnn.noise import build_noise_matrix, entrywise_l1_distance

from conftest import numerical_grad, rel_error


class TableModel:
    """Stand-in model whose softmax output is looked up by graph label."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def predict_proba(self, graphs):
        return self.rows[[g.label for g in graphs]]


def _g(label):
    return Graph(1, ((),), np.ones((1, 1)), label)


def _random_probs(rng, m):
    p = rng.random(m) + 1e-3
    return p / p.sum()


def test_cross_entropy_vector_values():
    np.testing.assert_allclose(cross_entropy_vector(tensor([0.5, 0.5])).data, [np.log(2)] * 2)
    np.testing.assert_allclose(cross_entropy_vector(tensor([0.8, 0.2])).data,
                               [0.22314, 1.60944], atol=5e-6)
    clamped = cross_entropy_vector(tensor([1.0, 0.0])).data
    assert clamped[0] == 0.0 and clamped[1] == pytest.approx(-np.log(1e-12))


def test_backward_loss_identity_equals_cross_entropy():
    rng = np.random.default_rng(0)
    probs = np.stack([_random_probs(rng, 4) for _ in range(20)])
    labels = rng.integers(0, 4, size=20)
    eye = invert_correction(np.eye(4))
    np.testing.assert_array_equal(backward_loss(probs, labels, eye).data,
                                  cross_entropy(probs, labels).data)


def test_backward_loss_two_class_example():
    C = invert_correction([[0.8, 0.2], [0.2, 0.8]])
    expected = (0.8 * -np.log(0.8) - 0.2 * -np.log(0.2)) / 0.6
    value = float(backward_loss(np.array([0.8, 0.2]), 0, C).data)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(-0.23895, abs=1e-5)


@settings(max_examples=200)
@given(st.sampled_from([2, 3, 5]), st.floats(0.0, 0.4), st.integers(0, 2 ** 32 - 1))
def test_unbiasedness(m, n, seed):
    rng = np.random.default_rng(seed)
    N = build_noise_matrix(m, n)
    C = estimate_exact(N)
    probs = _random_probs(rng, m)
    y = int(rng.integers(m))
    losses = backward_loss(np.tile(probs, (m, 1)), np.arange(m), C).data
    expected = float(cross_entropy(probs, y).data)
    assert abs(float(N.entries[y] @ losses) - expected) < 1e-10


def test_backward_loss_shape_error():
    with pytest.raises(ShapeError):
        backward_loss(np.array([0.5, 0.5]), 0, np.eye(3))


def test_invert_identity():
    C = invert_correction(np.eye(3))
    np.testing.assert_array_equal(C.inverse, np.eye(3))
    assert C.condition_number == pytest.approx(1.0)


def test_invert_two_class_closed_form():
    C = invert_correction([[0.8, 0.2], [0.2, 0.8]])
    np.testing.assert_allclose(C.inverse, np.array([[0.8, -0.2], [-0.2, 0.8]]) / 0.6, atol=1e-12)


def test_identical_rows_are_singular():
    with pytest.raises(SingularMatrixError):
        invert_correction([[0.6, 0.4], [0.6, 0.4]])


def test_blend_restores_invertibility():
    C = invert_correction([[0.6, 0.4], [0.6, 0.4]], blend=0.5)
    np.testing.assert_allclose(C.entries, [[0.8, 0.2], [0.3, 0.7]])
    with pytest.raises(ConfigError):
        invert_correction(np.eye(2), blend=1.5)


@settings(max_examples=50)
@given(st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
def test_correction_matrix_invariants(m, seed):
    rng = np.random.default_rng(seed)
    rows = np.stack([_random_probs(rng, m) for _ in range(m)]) + 2 * np.eye(m)
    rows /= rows.sum(axis=1, keepdims=True)
    C = invert_correction(rows, Source.ANCHOR)
    np.testing.assert_allclose(C.entries @ C.inverse, np.eye(m), atol=1e-8)
    np.testing.assert_allclose(C.entries.sum(axis=1), 1.0, atol=1e-6)
    assert np.isfinite(C.condition_number)


def test_conservative_example():
    C = estimate_conservative(TableModel([[0.9, 0.1], [0.3, 0.7]]), [_g(0), _g(1)])
    np.testing.assert_array_equal(C.entries, [[0.9, 0.1], [0.3, 0.7]])
    assert C.source is Source.CONSERVATIVE


def test_conservative_ties_prefer_lowest_index():
    probs = np.array([[0.2, 0.8], [0.7, 0.3], [0.7, 0.3], [0.2, 0.8]])
    np.testing.assert_array_equal(np.argmax(probs, axis=0), [1, 0])
    np.testing.assert_array_equal(conservative_from_probs(probs), probs[[1, 0]])


def test_conservative_constant_model_is_singular():
    with pytest.raises(SingularMatrixError):
        estimate_conservative(TableModel([[0.5, 0.5], [0.5, 0.5]]), [_g(0), _g(1), _g(0)])


@pytest.mark.parametrize("m, expected", [(2, 0.76), (3, 1.14), (5, 1.90)])
def test_overconfident_conservative_norm(m, expected):
    rows = np.full((m, m), 0.01 / (m - 1))
    np.fill_diagonal(rows, 0.99)
    C = estimate_conservative(TableModel(rows), [_g(i) for i in range(m)])
    assert C.diagnostics(build_noise_matrix(m, 0.2))["l1_distance"] == pytest.approx(expected, abs=1e-9)


def test_anchor_example():
    C = estimate_anchor(TableModel([[0.77, 0.23], [0.23, 0.77]]), [_g(1), _g(0)])
    np.testing.assert_array_equal(C.entries, [[0.77, 0.23], [0.23, 0.77]])
    assert entrywise_l1_distance(C.entries, build_noise_matrix(2, 0.2)) == pytest.approx(0.12, abs=1e-12)


def test_calibrated_anchor_distance_zero():
    N = build_noise_matrix(3, 0.2)
    C = estimate_anchor(TableModel(N.entries), [_g(i) for i in range(3)])
    assert entrywise_l1_distance(C.entries, N) == 0.0


def test_anchor_requires_every_class():
    with pytest.raises(ConfigError):
        estimate_anchor(TableModel(np.eye(2)), [_g(0), _g(0)])
    with pytest.raises(ConfigError):
        select_anchors([_g(0), _g(0)], 2)


def test_anchor_selection_first_per_class():
    graphs = [_g(1), _g(0), _g(1), _g(2), _g(0)]
    assert select_anchors(graphs, 3) == [1, 0, 3]
    assert select_anchors(graphs, 3, [4, 2, 3]) == [4, 2, 3]
    with pytest.raises(ConfigError):
        select_anchors(graphs, 3, [0, 2, 3])


def test_exact_estimator():
    N = build_noise_matrix(3, 0.2)
    C = estimate_exact(N)
    np.testing.assert_allclose(np.diag(C.entries), 0.8)
    assert entrywise_l1_distance(C.entries, N) == 0.0
    np.testing.assert_array_equal(estimate_exact(build_noise_matrix(2, 0.0)).entries, np.eye(2))
    with pytest.raises(SingularMatrixError):
        estimate_exact(build_noise_matrix(2, 0.5))


def test_diagnostics_keys():
    d = estimate_exact(build_noise_matrix(2, 0.2)).diagnostics(build_noise_matrix(2, 0.2))
    assert set(d) == {"source", "C", "C_inv", "condition_number", "mean_diag", "l1_distance"}
    assert d["source"] == "exact" and d["mean_diag"] == pytest.approx(0.8)


@pytest.mark.parametrize("m", [2, 3, 5])
def test_backward_loss_gradient_wrt_logits(m):
    rng = np.random.default_rng(m)
    C = estimate_exact(build_noise_matrix(m, 0.3))
    assert (C.inverse < 0).any()
    for _ in range(20):
        z = tensor(rng.normal(size=(4, m)), requires_grad=True)
        labels = rng.integers(0, m, size=4)

        def f():
            return float(ad.tsum(backward_loss(ad.row_softmax(z), labels, C)).data)

        with Tape() as tape:
            loss = ad.tsum(backward_loss(ad.row_softmax(z), labels, C))
        tape.backward(loss)
        for i, n in numerical_grad(f, z.data).items():
            assert rel_error(z.grad.reshape(-1)[i], n) < 1e-4


def test_correction_matrix_is_read_only():
    C = invert_correction(np.eye(2))
    assert isinstance(C, CorrectionMatrix)
    with pytest.raises(ValueError):
        C.entries[0, 0] = 2.0
