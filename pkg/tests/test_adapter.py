"""Layer and toy-model tests: forward, manual backward, factor gradients."""

from pathlib import Path

import numpy as np
import pytest

import scalar_reference as ref
from altlora import adapter as ad
from altlora.matcore import RandomStream, load_matrix, rel_error
from altlora.oracle import fd_entrywise_deviation, fd_merged_gradient

GOLDEN = Path(__file__).parent / "golden"


def _layer(w0, a, b, alpha):
    return ad.LoraLayer(np.asarray(w0, float), np.asarray(a, float), np.asarray(b, float), alpha)


def test_forward_zero_b_passes_base_weight_through():
    layer = _layer(np.eye(2), [[0.3, -0.7]], np.zeros((2, 1)), 1.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    y, _ = ad.forward(model, np.eye(2))
    np.testing.assert_array_equal(y, np.eye(2))


def test_forward_scaled_product():
    # s = alpha / r = 2
    layer = _layer(np.zeros((2, 2)), [[1.0, 0.0]], [[1.0], [0.0]], 2.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    y, _ = ad.forward(model, np.eye(2))
    np.testing.assert_allclose(y, [[2.0, 0.0], [0.0, 0.0]], atol=0)


def _relu_seed3_model():
    stream = RandomStream(3)
    w0 = stream.normal(6, 4)
    a = stream.normal(2, 4)
    b = stream.normal(6, 2)
    w2 = stream.normal(3, 6)
    x = stream.normal(4, 8)
    layer = ad.LoraLayer(w0, a, b, alpha=4.0)
    return ad.ToyModel(ad.TWO_LAYER_RELU, layer, w2=w2), x


def test_relu_forward_matches_scalar_loop_oracle():
    model, x = _relu_seed3_model()
    layer = model.layer
    want = np.array(
        ref.relu_forward(
            layer.w0.tolist(), layer.a.tolist(), layer.b.tolist(), layer.s, model.w2.tolist(), x.tolist()
        )
    )
    got, _ = ad.forward(model, x)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_relu_forward_matches_golden_file():
    model, x = _relu_seed3_model()
    got, _ = ad.forward(model, x)
    want = load_matrix(GOLDEN / "relu_forward_seed3.txt")
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_full_gradient_zero_at_perfect_fit():
    stream = RandomStream(2)
    layer = ad.LoraLayer(stream.normal(3, 4), stream.normal(2, 4), stream.normal(3, 2), 2.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    x = stream.normal(4, 5)
    y, cache = ad.forward(model, x)
    grads = ad.full_gradient(model, x, y, cache)
    np.testing.assert_array_equal(grads[0].g, np.zeros((3, 4)))


def test_full_gradient_linear_least_squares_form():
    # W = 0, X = I: G = -(2/m) T
    layer = _layer(np.zeros((2, 2)), np.zeros((1, 2)), np.zeros((2, 1)), 1.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    x = np.eye(2)
    target = np.array([[1.0, -2.0], [0.5, 3.0]])
    _, cache = ad.forward(model, x)
    g = ad.full_gradient(model, x, target, cache)[0].g
    np.testing.assert_allclose(g, -(2.0 / 2.0) * target, atol=0)


def test_linreg_gradient_matches_golden_file():
    stream = RandomStream(9)
    layer = ad.LoraLayer(stream.normal(3, 4), stream.normal(2, 4), stream.normal(3, 2), 3.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    x = stream.normal(4, 6)
    target = stream.normal(3, 6)
    _, cache = ad.forward(model, x)
    got = ad.full_gradient(model, x, target, cache)[0].g
    want = load_matrix(GOLDEN / "linreg_gradient_seed9.txt")
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_relu_gradient_matches_finite_differences():
    stream = RandomStream(11)
    layer = ad.LoraLayer(stream.normal(8, 3), stream.normal(2, 3), stream.normal(8, 2), 2.0)
    model = ad.ToyModel(ad.TWO_LAYER_RELU, layer, w2=stream.normal(3, 8))
    x = stream.normal(3, 5)
    target = stream.normal(3, 5)
    _, cache = ad.forward(model, x)
    got = ad.full_gradient(model, x, target, cache)[0].g
    want = fd_merged_gradient(model, x, target)
    assert fd_entrywise_deviation(got, want) < 1e-6


def test_lora_grads_zero_b_stalls_a():
    stream = RandomStream(4)
    layer = ad.LoraLayer(stream.normal(3, 4), stream.normal(2, 4), np.zeros((3, 2)), 2.0)
    grad_a, grad_b = ad.lora_grads(stream.normal(3, 4), layer)
    assert np.all(grad_a == 0.0)
    assert np.any(grad_b != 0.0)


def test_lora_grads_hand_values():
    g = np.array([[2.0, 0.0], [0.0, 3.0]])
    layer_a = _layer(np.zeros((2, 2)), [[0.0, 0.0]], [[1.0], [0.0]], 1.0)
    grad_a, _ = ad.lora_grads(g, layer_a)
    np.testing.assert_array_equal(grad_a, [[2.0, 0.0]])
    layer_b = _layer(np.zeros((2, 2)), [[1.0, 0.0]], [[0.0], [0.0]], 2.0)
    _, grad_b = ad.lora_grads(g, layer_b)
    np.testing.assert_array_equal(grad_b, [[4.0], [0.0]])


def test_lora_grads_match_direct_finite_differences():
    """Chain rule check: factor gradients equal FD of the loss in A and B."""
    stream = RandomStream(13)
    layer = ad.LoraLayer(stream.normal(4, 5), stream.normal(2, 5), stream.normal(4, 2), 3.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    x = stream.normal(5, 7)
    target = stream.normal(4, 7)
    _, cache = ad.forward(model, x)
    g = ad.full_gradient(model, x, target, cache)[0]
    grad_a, grad_b = ad.lora_grads(g, layer)

    h = 1e-5

    def loss_with(a=None, b=None):
        probe = ad.LoraLayer(layer.w0, layer.a if a is None else a, layer.b if b is None else b, layer.alpha)
        y, _ = ad.forward(ad.ToyModel(ad.LINEAR_REGRESSION, probe), x)
        return ad.mse_loss(y, target)

    fd_a = np.zeros_like(layer.a)
    for i in range(layer.r):
        for j in range(layer.d):
            up, down = layer.a.copy(), layer.a.copy()
            up[i, j] += h
            down[i, j] -= h
            fd_a[i, j] = (loss_with(a=up) - loss_with(a=down)) / (2 * h)
    fd_b = np.zeros_like(layer.b)
    for i in range(layer.k):
        for j in range(layer.r):
            up, down = layer.b.copy(), layer.b.copy()
            up[i, j] += h
            down[i, j] -= h
            fd_b[i, j] = (loss_with(b=up) - loss_with(b=down)) / (2 * h)
    assert fd_entrywise_deviation(grad_a, fd_a) < 1e-6
    assert fd_entrywise_deviation(grad_b, fd_b) < 1e-6


def test_merged_weight_basics():
    stream = RandomStream(1)
    w0 = stream.normal(3, 4)
    zero_b = ad.LoraLayer(w0, stream.normal(2, 4), np.zeros((3, 2)), 2.0)
    np.testing.assert_array_equal(ad.merged_weight(zero_b), w0)
    rank1 = _layer(np.zeros((2, 2)), [[1.0, 2.0]], [[1.0], [1.0]], 1.0)
    np.testing.assert_array_equal(ad.merged_weight(rank1), [[1.0, 2.0], [1.0, 2.0]])


def test_merged_weight_consistent_with_forward_on_identity():
    stream = RandomStream(5)
    layer = ad.LoraLayer(stream.normal(4, 4), stream.normal(2, 4), stream.normal(4, 2), 2.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    y, _ = ad.forward(model, np.eye(4))
    assert rel_error(y, ad.merged_weight(layer)) < 1e-12


def test_init_policies():
    stream = RandomStream(6)
    w0 = stream.normal(16, 12)
    layer = ad.init_layer(w0, r=3, seed=6)
    assert np.all(layer.b == 0.0)
    assert layer.a.shape == (3, 12)
    assert layer.s == 1.0  # alpha defaults to r
    spectral = ad.init_layer(w0, r=3, init_a="spectral", init_b="spectral", seed=6)
    # spectral rows/columns are orthonormal singular vectors of w0
    np.testing.assert_allclose(spectral.a @ spectral.a.T, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(spectral.b.T @ spectral.b, np.eye(3), atol=1e-10)
    u, s, vt = np.linalg.svd(w0)
    np.testing.assert_allclose(np.abs(np.diag(spectral.a @ vt[:3].T)), np.ones(3), atol=1e-8)
    gauss = ad.init_layer(w0, r=3, init_a="gaussian", init_b="gaussian", seed=7)
    assert gauss.a.std() < 1.0  # fan-in scaled


def test_shape_validation():
    with pytest.raises(ad.ShapeMismatch):
        ad.LoraLayer(np.zeros((3, 4)), np.zeros((2, 5)), np.zeros((3, 2)), 1.0)
    with pytest.raises(ad.ShapeMismatch):
        ad.LoraLayer(np.zeros((3, 4)), np.zeros((5, 4)), np.zeros((3, 5)), 1.0)  # r > min(k, d)
    layer = ad.LoraLayer(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((3, 2)), 1.0)
    model = ad.ToyModel(ad.LINEAR_REGRESSION, layer)
    with pytest.raises(ad.ShapeMismatch):
        ad.forward(model, np.zeros((5, 2)))
    with pytest.raises(ad.ShapeMismatch):
        ad.lora_grads(np.zeros((4, 4)), layer)
