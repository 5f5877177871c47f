import numpy as np
import numpy.testing as npt
import pytest

from core.errors import MissingCacheError, ShapeMismatchError, ValidationError
from core.neuro import (
    Activation,
    Flatten,
    Layer,
    LayerKind,
    LayerSpec,
    Lift,
    ParameterStore,
    Sequential,
    Squeeze,
    conv1d_backward,
    conv1d_forward,
    deconv1d_backward,
    deconv1d_forward,
    dense_forward,
    gradient_check,
    lrelu,
    rmsprop_step,
)


def _single_layer(kind: LayerKind, activation=Activation.LINEAR, seed=7, **kwargs) -> Sequential:
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    layer = Layer(f"toy.{kind.value}", LayerSpec(kind, activation=activation, **kwargs), store, rng)
    return Sequential([layer], store)


class DoubledGradLayer(Layer):
    """Backward that reports twice the true weight gradient"""

    def backward(self, grad_out, cache):
        before = self.weight.grad.copy()
        grad_x = super().backward(grad_out, cache)
        self.weight.grad += self.weight.grad - before
        return grad_x


def test_conv_same_output_length():
    spec = LayerSpec(LayerKind.CONV1D, 1, 1, kernel=7, stride=3)
    assert spec.output_length(513) == 171
    out, _ = conv1d_forward(np.zeros((2, 1, 513)), np.zeros((1, 1, 7)), np.zeros(1), stride=3)
    assert out.shape == (2, 1, 171)


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((3, 1, 20))
    out, _ = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
    npt.assert_allclose(out, x, atol=1e-12)


def test_conv_hand_computed():
    x = np.zeros((1, 1, 8))
    x[0, 0, 1] = 1.0
    out, _ = conv1d_forward(x, np.array([[[1.0, 2.0, 1.0]]]), np.zeros(1))
    npt.assert_allclose(out[0, 0], [1, 2, 1, 0, 0, 0, 0, 0], atol=1e-12)


def test_conv_rejects_wrong_channels():
    with pytest.raises(ShapeMismatchError):
        conv1d_forward(np.zeros((1, 2, 8)), np.zeros((1, 1, 3)), np.zeros(1))


def test_deconv_same_output_length():
    out, _ = deconv1d_forward(np.zeros((2, 4, 19)), np.zeros((4, 2, 9)), np.zeros(2), stride=3)
    assert out.shape == (2, 2, 57)


def test_deconv_is_adjoint_of_conv(rng):
    """<conv(x), y> == <x, deconv(y)> for shared weights and zero bias"""
    w = rng.standard_normal((3, 2, 5))
    x = rng.standard_normal((1, 2, 24))
    conv_out, _ = conv1d_forward(x, w, np.zeros(3), stride=3)
    y = rng.standard_normal(conv_out.shape)
    deconv_out, _ = deconv1d_forward(y, w, np.zeros(2), stride=3)
    assert np.sum(conv_out * y) == pytest.approx(np.sum(x * deconv_out), rel=1e-9)


@pytest.mark.parametrize("kind,kwargs,shape", [
    (LayerKind.CONV1D, dict(in_channels=2, out_channels=3, kernel=5, stride=2), (4, 2, 32)),
    (LayerKind.CONV1D, dict(in_channels=1, out_channels=2, kernel=4, stride=3), (4, 1, 31)),
    (LayerKind.DECONV1D, dict(in_channels=3, out_channels=2, kernel=7, stride=3), (4, 3, 10)),
    (LayerKind.DECONV1D, dict(in_channels=2, out_channels=1, kernel=1, stride=1), (4, 2, 32)),
    (LayerKind.DENSE, dict(in_channels=32, out_channels=6), (4, 32)),
])
@pytest.mark.parametrize("activation", [Activation.LINEAR, Activation.LRELU, Activation.SIGMOID])
def test_layer_gradients(kind, kwargs, shape, activation):
    net = _single_layer(kind, activation, **kwargs)
    x = np.random.default_rng(7).standard_normal(shape)
    report = gradient_check(net, x, tolerance=1e-4)
    assert report.passed, report.errors


def test_zero_upstream_gradient(rng):
    net = _single_layer(LayerKind.CONV1D, in_channels=1, out_channels=2, kernel=3, stride=2)
    x = rng.standard_normal((2, 1, 16))
    out, caches = net.forward(x)
    net.backward(np.zeros_like(out), caches)
    for _, param in net.store.items():
        npt.assert_array_equal(param.grad, 0.0)


def test_backward_is_linear(rng):
    x = rng.standard_normal((2, 2, 16))
    w = rng.standard_normal((3, 2, 5))
    out, cache = conv1d_forward(x, w, np.zeros(3), stride=2)
    g1, g2 = rng.standard_normal(out.shape), rng.standard_normal(out.shape)
    combined = conv1d_backward(g1 + g2, cache)
    separate = [a + b for a, b in zip(conv1d_backward(g1, cache), conv1d_backward(g2, cache))]
    for c, s in zip(combined, separate):
        npt.assert_allclose(c, s, atol=1e-9)

    y, dcache = deconv1d_forward(x, rng.standard_normal((2, 3, 5)), np.zeros(3), stride=2)
    h1, h2 = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
    combined = deconv1d_backward(h1 + h2, dcache)
    separate = [a + b for a, b in zip(deconv1d_backward(h1, dcache), deconv1d_backward(h2, dcache))]
    for c, s in zip(combined, separate):
        npt.assert_allclose(c, s, atol=1e-9)


def test_missing_cache():
    with pytest.raises(MissingCacheError):
        conv1d_backward(np.zeros((1, 1, 4)), None)
    with pytest.raises(MissingCacheError):
        Sequential([Lift()]).backward(np.zeros((1, 1, 4)), None)


def test_dense_identity(rng):
    x = rng.standard_normal((5, 8))
    y, _ = dense_forward(x, np.eye(8), np.zeros(8))
    npt.assert_allclose(y, x)


def test_dense_matches_loops(rng):
    x = rng.standard_normal((8, 8))
    w = rng.standard_normal((8, 8))
    b = rng.standard_normal(8)
    expected = np.zeros((8, 8))
    for n in range(8):
        for j in range(8):
            expected[n, j] = b[j] + sum(x[n, i] * w[i, j] for i in range(8))
    y, _ = dense_forward(x, w, b)
    npt.assert_allclose(y, expected, atol=1e-12)


def test_lrelu_values():
    npt.assert_allclose(lrelu(np.array([-1.0, 0.0, 2.0])), [-0.2, 0.0, 2.0])
    npt.assert_allclose(lrelu(np.array([-3.0, 0.5]), slope=0.0), [0.0, 0.5])


@pytest.mark.parametrize("point,expected", [(-1.0, 0.2), (1.0, 1.0)])
def test_lrelu_slope_by_finite_difference(point, expected):
    eps = 1e-6
    numeric = (lrelu(np.array(point + eps)) - lrelu(np.array(point - eps))) / (2 * eps)
    assert float(numeric) == pytest.approx(expected, rel=1e-6)


def test_rmsprop_first_step():
    store = ParameterStore()
    param = store.add("w", np.zeros(4))
    param.grad[...] = 1.0
    rmsprop_step(store, lr=1e-5)
    npt.assert_allclose(store["w"].value, -1e-5 / np.sqrt(0.1 + 1e-8), rtol=1e-12)
    assert store["w"].value[0] == pytest.approx(-3.1623e-5, rel=1e-4)
    npt.assert_array_equal(store["w"].grad, 0.0)


def test_rmsprop_zero_gradient():
    store = ParameterStore()
    store.add("w", np.arange(3.0))
    rmsprop_step(store, lr=0.1)
    npt.assert_array_equal(store["w"].value, np.arange(3.0))


def test_rmsprop_two_steps_match_recurrence():
    store = ParameterStore()
    store.add("w", np.array([0.5]))
    lr, decay, eps, g = 1e-3, 0.9, 1e-8, 0.3
    value, acc = 0.5, 0.0
    for _ in range(2):
        store["w"].grad[...] = g
        rmsprop_step(store, lr, decay, eps)
        acc = decay * acc + (1 - decay) * g * g
        value = value - lr * g / np.sqrt(acc + eps)
    assert abs(store["w"].value[0] - value) <= 1e-12


def test_two_layer_network_passes():
    store = ParameterStore()
    rng = np.random.default_rng(3)
    net = Sequential([
        Lift(),
        Layer("toy.conv1", LayerSpec(LayerKind.CONV1D, 1, 2, kernel=5, stride=2), store, rng),
        Layer("toy.conv2", LayerSpec(LayerKind.CONV1D, 2, 1, kernel=3, stride=2,
                                     activation=Activation.LINEAR), store, rng),
        Squeeze(),
    ], store)
    report = gradient_check(net, rng.standard_normal((3, 24)), seed=3)
    assert set(report.errors) == {"toy.conv1", "toy.conv2"}
    assert report.passed, report.errors


def test_corrupted_backward_is_flagged():
    store = ParameterStore()
    rng = np.random.default_rng(3)
    good = Layer("toy.good", LayerSpec(LayerKind.DENSE, 6, 5, activation=Activation.LINEAR), store, rng)
    bad = DoubledGradLayer("toy.bad", LayerSpec(LayerKind.DENSE, 5, 4, activation=Activation.LINEAR),
                           store, rng)
    report = gradient_check(Sequential([good, bad], store), rng.standard_normal((3, 6)))
    assert report.failures == ["toy.bad"]
    assert not report.passed


def test_parameterless_network():
    report = gradient_check(Sequential([Lift(), Flatten()]), np.ones((2, 5)))
    assert report.errors == {}
    assert report.passed
    assert report.max_error == 0.0


def test_store_round_trip_and_merge(rng):
    net = _single_layer(LayerKind.DENSE, in_channels=4, out_channels=3)
    arrays = net.store.to_arrays("m.")
    assert set(arrays) == {"m.toy.dense.weight", "m.toy.dense.weight@rms",
                           "m.toy.dense.bias", "m.toy.dense.bias@rms"}
    other = _single_layer(LayerKind.DENSE, seed=99, in_channels=4, out_channels=3)
    other.store.load_arrays(arrays, "m.")
    npt.assert_array_equal(other.store["toy.dense.weight"].value, net.store["toy.dense.weight"].value)

    with pytest.raises(ValidationError):
        ParameterStore.merged(net.store, other.store)
    bad = {k: np.zeros((2, 2)) for k in arrays}
    with pytest.raises(ShapeMismatchError):
        other.store.load_arrays(bad, "m.")
