import math

import numpy as np
import pytest

from semguide.errors import ShapeError
from semguide.neural import (AdamW, Mlp, adamw_step, mlp_backward, mlp_forward,
                             timestep_embedding)


def _central_diff(f, params, h=1e-5):
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = p[i]
            p[i] = keep + h
            up = f()
            p[i] = keep - h
            down = f()
            p[i] = keep
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def test_identity_layer():
    net = Mlp([3, 3], [np.eye(3)], [np.zeros(3)], output_activation="identity")
    np.testing.assert_array_equal(net(np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])


def test_zero_weights_return_bias():
    rng = np.random.default_rng(0)
    net = Mlp.init([4, 5, 2], rng, activation="tanh")
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = [0.25, -3.0]
    for x in rng.standard_normal((5, 4)):
        np.testing.assert_array_equal(net(x), [0.25, -3.0])


def test_hand_evaluated_2_2_1_tanh():
    w1 = np.array([[0.5, -1.0], [0.25, 2.0]])  # (in, out)
    b1 = np.array([0.1, -0.2])
    w2 = np.array([[1.5], [-0.5]])
    b2 = np.array([0.3])
    net = Mlp([2, 2, 1], [w1, w2], [b1, b2], activation="tanh")
    x0, x1 = 0.8, -0.4
    h0 = math.tanh(0.5 * x0 + 0.25 * x1 + 0.1)
    h1 = math.tanh(-1.0 * x0 + 2.0 * x1 - 0.2)
    expected = 1.5 * h0 - 0.5 * h1 + 0.3
    assert net(np.array([x0, x1]))[0] == pytest.approx(expected, abs=1e-15)


def test_linear_least_squares_gradient():
    rng = np.random.default_rng(1)
    net = Mlp.init([3, 2], rng, output_activation="identity")
    x = rng.standard_normal(3)
    y = rng.standard_normal(2)
    out, cache = mlp_forward(net, x)
    grads, _ = mlp_backward(net, cache, 2.0 * (out - y))
    resid = x @ net.weights[0] + net.biases[0] - y
    # weights are stored (in, out), so dL/dW = x^T (2 r)
    np.testing.assert_allclose(grads[0], np.outer(x, 2 * resid), rtol=1e-13)
    np.testing.assert_allclose(grads[1], 2 * resid, rtol=1e-13)


def test_zero_output_grad_gives_zero_gradients():
    rng = np.random.default_rng(2)
    net = Mlp.init([4, 6, 3], rng)
    _, cache = mlp_forward(net, rng.standard_normal((5, 4)))
    grads, gin = mlp_backward(net, cache, np.zeros((5, 3)))
    assert all(not np.any(g) for g in grads)
    assert not np.any(gin)


@pytest.mark.parametrize("activation", ["tanh", "silu", "relu"])
def test_gradients_match_finite_differences(activation):
    rng = np.random.default_rng(3)
    net = Mlp.init([3, 5, 4, 2], rng, activation=activation)
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 2))

    def loss():
        return float(np.sum((net(x) - y) ** 2))

    out, cache = mlp_forward(net, x)
    grads, gin = mlp_backward(net, cache, 2 * (out - y))
    numeric = _central_diff(loss, net.params())
    for a, n in zip(grads, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)

    def loss_x():
        return float(np.sum((net(x) - y) ** 2))

    (num_x,) = _central_diff(loss_x, [x])
    np.testing.assert_allclose(gin, num_x, rtol=1e-4, atol=1e-7)


def test_sigmoid_output_gradient():
    rng = np.random.default_rng(4)
    net = Mlp.init([3, 4, 1], rng, output_activation="sigmoid")
    x = rng.standard_normal((6, 3))
    out, cache = mlp_forward(net, x)
    grads, _ = mlp_backward(net, cache, np.ones_like(out))
    numeric = _central_diff(lambda: float(np.sum(net(x))), net.params())
    for a, n in zip(grads, numeric):
        np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-9)


def test_shape_and_cache_errors():
    rng = np.random.default_rng(5)
    net = Mlp.init([3, 2], rng)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(4))
    _, cache = mlp_forward(net, np.zeros(3))
    other = Mlp.init([3, 2], rng)
    with pytest.raises(ShapeError):
        mlp_backward(other, cache, np.zeros(2))
    grads, _ = mlp_backward(net, cache, np.ones(2))
    adamw_step(AdamW(lr=0.1), net, grads)
    with pytest.raises(ShapeError, match="stale"):
        mlp_backward(net, cache, np.ones(2))


def test_param_count():
    net = Mlp.init([7, 5, 3, 1], np.random.default_rng(0))
    assert net.num_params == 7 * 5 + 5 + 5 * 3 + 3 + 3 * 1 + 1


def test_adamw_zero_gradient_no_decay():
    p = [np.array([1.5, -2.0])]
    opt = AdamW(lr=0.1, weight_decay=0.0)
    for _ in range(5):
        opt.step(p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.5, -2.0])


def test_adamw_first_step():
    p = [np.array([0.0])]
    AdamW(lr=0.1, weight_decay=0.0).step(p, [np.array([1.0])])
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p[0][0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_decay_only_shrinks():
    p = [np.array([3.0])]
    opt = AdamW(lr=0.1, weight_decay=0.5)
    prev = 3.0
    for _ in range(50):
        opt.step(p, [np.zeros(1)])
        assert abs(p[0][0]) < prev
        prev = abs(p[0][0])


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        AdamW().step([np.zeros(2)], [np.zeros(3)])


def test_timestep_embedding():
    e0 = timestep_embedding(0, 8, 200)
    np.testing.assert_array_equal(e0, [0, 1, 0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(timestep_embedding(17, 8, 200), timestep_embedding(17, 8, 200))
    with pytest.raises(ValueError):
        timestep_embedding(3, 7, 200)


@pytest.mark.parametrize("dim", [2, 32])
def test_timestep_embedding_injective(dim):
    embs = timestep_embedding(np.arange(1, 201), dim, 200)
    assert np.all(np.abs(embs) <= 1.0)
    diffs = np.abs(embs[:, None, :] - embs[None, :, :]).max(axis=2)
    np.fill_diagonal(diffs, np.inf)
    assert diffs.min() > 0


def test_init_is_seeded():
    a = Mlp.init([4, 8, 2], np.random.default_rng(9))
    b = Mlp.init([4, 8, 2], np.random.default_rng(9))
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.params(), b.params()))


def test_dict_round_trip_is_exact():
    net = Mlp.init([4, 8, 2], np.random.default_rng(9), activation="tanh", output_activation="sigmoid")
    back = Mlp.from_dict(net.to_dict())
    x = np.random.default_rng(1).standard_normal((3, 4))
    assert net(x).tobytes() == back(x).tobytes()
    assert back.activation == "tanh" and back.output_activation == "sigmoid"
