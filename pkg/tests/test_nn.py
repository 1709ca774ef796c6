import numpy as np
import pytest

from morphdict.nn import (Adam, BatchNorm, CompositionError, Conv2D, Dense, Flatten, LeakyReLU,
                          NeuralNet, Sigmoid, StateError, adam_step, grad_check,
                          networks_from_bytes, networks_to_bytes)


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_empty_net_is_identity():
    net = NeuralNet([])
    x = _rng().standard_normal((3, 4))
    np.testing.assert_array_equal(net.forward(x, training=True), x)
    np.testing.assert_array_equal(net.backward(x), x)


def test_leaky_relu_values():
    assert NeuralNet([LeakyReLU(0.1)]).forward(np.array([[-2.0]]))[0, 0] == pytest.approx(-0.2)
    x = _rng().standard_normal((5, 5))
    np.testing.assert_array_equal(LeakyReLU(1.0).forward(x), x)
    np.testing.assert_array_equal(LeakyReLU(0.0).forward(x), np.maximum(x, 0))


def test_conv_stamps_kernel():
    conv = Conv2D(1, 1, 3, padding="same")
    K = np.arange(1.0, 10.0).reshape(3, 3)
    conv.params["weight"][...] = K[None, None]
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 1.0
    out = conv.forward(x)[0, 0]
    # direct correlation oracle: out[y, x] = sum K[i, j] * img[y + i - 1, x + j - 1]
    expected = np.zeros((5, 5))
    for y in range(5):
        for xx in range(5):
            for i in range(3):
                for j in range(3):
                    yy, xi = y + i - 1, xx + j - 1
                    if 0 <= yy < 5 and 0 <= xi < 5:
                        expected[y, xx] += K[i, j] * x[0, 0, yy, xi]
    np.testing.assert_array_equal(out, expected)
    # a one-hot through correlation gives the kernel flipped about the hot pixel
    np.testing.assert_array_equal(out[1:4, 1:4], K[::-1, ::-1])


def test_conv_geometry():
    conv = Conv2D(1, 4, 4, stride=2, padding=1)
    assert conv.output_shape((1, 28, 28)) == (4, 14, 14)
    assert Conv2D(2, 3, 3).output_shape((2, 7, 9)) == (3, 5, 7)
    with pytest.raises(CompositionError):
        Conv2D(1, 1, 5).output_shape((1, 3, 3))


def test_dense_weight_gradient_is_outer_product():
    layer = Dense(3, 2, rng=_rng())
    x = _rng(1).standard_normal((1, 3))
    up = _rng(2).standard_normal((1, 2))
    layer.forward(x, training=True)
    layer.backward(up)
    np.testing.assert_allclose(layer.grads["weight"], np.outer(x[0], up[0]), atol=1e-15)


def test_composition_error_names_layer():
    net = NeuralNet([Dense(4, 3), Dense(5, 2)])
    with pytest.raises(CompositionError, match="layer 1"):
        net.forward(np.ones((2, 4)))
    with pytest.raises(CompositionError, match="layer 1"):
        NeuralNet([Dense(4, 3), Dense(5, 2)], input_shape=(4,))


def test_backward_without_forward():
    with pytest.raises(StateError):
        NeuralNet([Dense(2, 2)]).backward(np.ones((1, 2)))
    layer = Dense(2, 2)
    layer.forward(np.ones((1, 2)), training=False)
    with pytest.raises(StateError):
        layer.backward(np.ones((1, 2)))


def _nets():
    r = _rng(5)
    return {
        "dense": (NeuralNet([Dense(5, 3, rng=r)]), r.standard_normal((4, 5))),
        "conv_valid": (NeuralNet([Conv2D(2, 3, 3, rng=r)]), r.standard_normal((2, 2, 6, 5))),
        "conv_strided": (NeuralNet([Conv2D(1, 2, 4, stride=2, padding=1, rng=r)]),
                         r.standard_normal((2, 1, 8, 8))),
        "conv_same": (NeuralNet([Conv2D(2, 2, 3, padding="same", rng=r)]),
                      r.standard_normal((2, 2, 5, 5))),
        "batchnorm_2d": (NeuralNet([BatchNorm(4)]), r.standard_normal((6, 4))),
        "batchnorm_4d": (NeuralNet([BatchNorm(3)]), r.standard_normal((3, 3, 4, 4))),
        "leaky_relu": (NeuralNet([LeakyReLU(0.1)]), r.standard_normal((4, 7))),
        "sigmoid": (NeuralNet([Sigmoid()]), r.standard_normal((4, 7))),
        "flatten": (NeuralNet([Flatten(), Dense(18, 2, rng=r)]), r.standard_normal((2, 2, 3, 3))),
    }


@pytest.mark.parametrize("kind", sorted(_nets()))
def test_every_layer_passes_grad_check(kind):
    net, x = _nets()[kind]
    assert grad_check(net, x, eps=1e-6) <= 1e-5


def test_linear_net_grad_check_is_tight():
    # no truncation error on a linear map, so a wide step only shrinks roundoff
    net = NeuralNet([Dense(6, 4, rng=_rng()), Dense(4, 2, rng=_rng(1))])
    assert grad_check(net, _rng(2).standard_normal((3, 6)), eps=1e-3) <= 1e-9


def test_grad_check_detects_corruption():
    net = NeuralNet([Dense(6, 4, rng=_rng()), LeakyReLU(0.1), Dense(4, 2, rng=_rng(1))])
    x = _rng(2).standard_normal((3, 6))
    assert grad_check(net, x) <= 1e-5
    assert grad_check(net, x, corrupt=0.1) > 1e-2


def test_grad_check_float32():
    net = NeuralNet([Conv2D(1, 2, 3, rng=_rng()), Flatten(), Dense(18, 3, rng=_rng(1)),
                     BatchNorm(3), Sigmoid()]).astype(np.float32)
    assert grad_check(net, _rng(2).random((4, 1, 5, 5)), eps=1e-5) <= 1e-3


class TestBatchNorm:
    def test_training_statistics(self):
        bn = BatchNorm(3)
        x = _rng().standard_normal((50, 3, 4, 4)) * 5 + 2
        out = bn.forward(x, training=True)
        assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-6
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_update(self):
        bn = BatchNorm(2)
        x = _rng().standard_normal((10, 2)) + 3
        bn.forward(x, training=True)
        np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=0))

    def test_inference_is_per_sample(self):
        bn = BatchNorm(2)
        bn.forward(_rng().standard_normal((10, 2)), training=True)
        x = _rng(1).standard_normal((6, 2))
        full = bn.forward(x)
        perm = _rng(2).permutation(6)
        np.testing.assert_array_equal(bn.forward(x[perm]), full[perm])
        np.testing.assert_array_equal(bn.forward(x[:1]), full[:1])


class TestAdam:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(Adam(), p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_size(self):
        p = {"w": np.array([0.0, 0.0])}
        Adam(lr=1e-3).step(p, {"w": np.array([3.0, -0.5])})
        # bias-corrected first step is lr * g / (|g| + eps)
        np.testing.assert_allclose(p["w"], [-1e-3 * 3 / (3 + 1e-8), 1e-3 * 0.5 / (0.5 + 1e-8)],
                                   rtol=1e-12)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            p, opt = {"w": np.ones(3)}, Adam()
            for g in (np.array([1.0, 2.0, 3.0]),) * 2:
                opt.step(p, {"w": g})
            runs.append(p["w"].copy())
        np.testing.assert_array_equal(*runs)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"w": np.ones(2)}, {"w": np.ones(3)})


def test_checkpoint_round_trip():
    r = _rng()
    net = NeuralNet([Conv2D(1, 2, 3, stride=2, padding=1, rng=r), BatchNorm(2), LeakyReLU(0.2),
                     Flatten(), Dense(8, 3, rng=r), Sigmoid()], input_shape=(1, 4, 4))
    net.forward(r.standard_normal((5, 1, 4, 4)), training=True)
    raw = networks_to_bytes({"net": net}, {"tag": 1}, {"extra": np.arange(3.0)})
    assert raw[:4] == b"MNET"
    nets, meta, extra = networks_from_bytes(raw)
    x = r.standard_normal((2, 1, 4, 4))
    np.testing.assert_array_equal(nets["net"].forward(x), net.forward(x))
    assert meta == {"tag": 1}
    np.testing.assert_array_equal(extra["extra"], np.arange(3.0))
    with pytest.raises(ValueError):
        networks_from_bytes(raw[:-1])
