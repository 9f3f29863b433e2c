import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lure.engine import (
    Network,
    NetworkSpec,
    OptimizerConfig,
    checkpoint_bytes,
    init_uniform,
    loss_ce,
    lr_at,
    read_checkpoint,
    sgd_step,
    softmax,
    write_checkpoint,
)
from lure.errors import ConfigurationError, InputError, ParseError, ProtocolError


def loop_forward(net, x):
    """Dense forward pass with explicit Python loops; independent of numpy matmul."""
    h = [list(map(float, row)) for row in x]
    for layer in range(1, net.spec.n_layers + 1):
        w = net.weight(layer).values
        b = net.bias(layer).values
        out = []
        for row in h:
            z = []
            for j in range(w.shape[1]):
                acc = math.fsum(row[i] * w[i, j] for i in range(w.shape[0])) + b[j]
                z.append(max(acc, 0.0) if layer < net.spec.n_layers else acc)
            out.append(z)
        h = out
    return np.array(h)


def mean_loss(net, x, y):
    return loss_ce(net.forward(x), y)[0]


def fd_gradients(net, x, y, step=1e-6):
    grads = []
    for e in net.entries:
        g = np.zeros_like(e.values)
        flat = e.values.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = mean_loss(net, x, y)
            flat[j] = orig - step
            down = mean_loss(net, x, y)
            flat[j] = orig
            g.reshape(-1)[j] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


# -- forward ------------------------------------------------------------------

def test_zero_network_gives_zero_logits():
    net = Network.zeros(NetworkSpec((3, 4, 2)))
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.all(net.forward(x) == 0.0)


def test_identity_single_layer():
    net = Network.zeros(NetworkSpec((2, 2)))
    net.weight(1).values[...] = np.eye(2)
    np.testing.assert_array_equal(net.forward(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(7)
    net = Network.initialize(NetworkSpec((5, 6, 3)), rng)
    x = rng.normal(size=(4, 5))
    expected = loop_forward(net, x)
    got = net.forward(x)
    assert np.max(rel_err(got, expected)) < 1e-12


def test_forward_rejects_wrong_width():
    net = Network.initialize(NetworkSpec((3, 4, 2)), np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="layer 1"):
        net.forward(np.zeros((2, 4)))


# -- loss ---------------------------------------------------------------------

def test_uniform_logits_loss_is_log_c():
    loss, _ = loss_ce(np.zeros((3, 10)), [0, 4, 9])
    assert loss == pytest.approx(math.log(10), abs=1e-15)


def test_loss_saturates_with_margin():
    losses = [loss_ce(np.array([[m, 0.0, 0.0]]), [0])[0] for m in (1.0, 10.0, 100.0, 1000.0)]
    assert all(a >= b for a, b in zip(losses, losses[1:]))
    assert losses[0] > losses[1] > 0.0
    assert losses[-1] == pytest.approx(0.0, abs=1e-40)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    _, dlogits = loss_ce(logits, labels)
    h = 1e-6
    fd = np.zeros_like(logits)
    for idx in np.ndindex(*logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += h
        down[idx] -= h
        fd[idx] = (loss_ce(up, labels)[0] - loss_ce(down, labels)[0]) / (2 * h)
    assert np.max(rel_err(dlogits, fd)) < 1e-6


def test_loss_rejects_bad_labels():
    with pytest.raises(InputError):
        loss_ce(np.zeros((2, 3)), [0, 3])


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_softmax_rows_and_loss_nonnegative(n, c, shift, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=10, size=(n, c)) + shift
    assert np.all(np.abs(softmax(logits).sum(axis=1) - 1.0) < 1e-12)
    assert loss_ce(logits, rng.integers(0, c, size=n))[0] >= 0.0


# -- backward -----------------------------------------------------------------

def test_zero_dlogits_zero_gradients():
    rng = np.random.default_rng(1)
    net = Network.initialize(NetworkSpec((3, 5, 2)), rng)
    x = rng.normal(size=(4, 3))
    net.forward(x)
    net.backward(x, np.zeros((4, 2)))
    assert all(np.all(e.grad == 0) for e in net.entries)


def test_one_parameter_two_class_hand_gradient():
    # logits = [w x, 0]; loss = -log softmax_0 = log(1 + exp(-w x)); dL/dw = -x / (1 + exp(w x))
    net = Network.zeros(NetworkSpec((1, 2)))
    w, x = 0.7, 1.3
    net.weight(1).values[0, 0] = w
    inputs = np.array([[x]])
    _, d = loss_ce(net.forward(inputs), [0])
    net.backward(inputs, d)
    assert net.weight(1).grad[0, 0] == pytest.approx(-x / (1 + math.exp(w * x)), rel=1e-14)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    net = Network.initialize(NetworkSpec((4, 6, 5, 3)), rng)
    x = rng.normal(size=(7, 4))
    y = rng.integers(0, 3, size=7)
    _, d = loss_ce(net.forward(x), y)
    net.backward(x, d)
    analytic = [e.grad.copy() for e in net.entries]
    for a, f in zip(analytic, fd_gradients(net, x, y)):
        assert np.max(rel_err(a, f)) < 1e-5


def test_backward_overwrites():
    rng = np.random.default_rng(2)
    net = Network.initialize(NetworkSpec((3, 4, 2)), rng)
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, size=5)
    for _ in range(2):
        _, d = loss_ce(net.forward(x), y)
        net.backward(x, d)
    once = [e.grad.copy() for e in net.entries]
    _, d = loss_ce(net.forward(x), y)
    net.backward(x, d)
    for a, e in zip(once, net.entries):
        np.testing.assert_array_equal(a, e.grad)


def test_backward_without_forward_is_protocol_error():
    net = Network.initialize(NetworkSpec((3, 4, 2)), np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        net.backward(np.zeros((1, 3)), np.zeros((1, 2)))
    net.forward(np.zeros((1, 3)))
    with pytest.raises(ProtocolError):
        net.backward(np.ones((1, 3)), np.zeros((1, 2)))


# -- optimizer ----------------------------------------------------------------

def _scalar_net(theta, grad):
    net = Network.zeros(NetworkSpec((1, 1)))
    net.weight(1).values[0, 0] = theta
    net.weight(1).grad[0, 0] = grad
    return net


def test_plain_gradient_step():
    net = _scalar_net(1.0, 2.0)
    sgd_step(net, OptimizerConfig(0.1, 0.0, 0.0), 0.1)
    assert net.weight(1).values[0, 0] == pytest.approx(0.8, abs=1e-15)


def test_zero_gradient_is_fixed_point():
    net = _scalar_net(1.5, 0.0)
    for _ in range(3):
        sgd_step(net, OptimizerConfig(0.1, 0.9, 0.0), 0.1)
    assert net.weight(1).values[0, 0] == 1.5


def test_two_heavy_ball_steps_match_hand_recursion():
    lr, mu, wd = 0.1, 0.9, 0.01
    theta, g1, g2 = 2.0, 0.5, -0.3
    # step 1: v1 = g1 + wd θ0; θ1 = θ0 - lr v1
    v1 = g1 + wd * theta
    t1 = theta - lr * v1
    # step 2: v2 = mu v1 + g2 + wd θ1; θ2 = θ1 - lr v2
    v2 = mu * v1 + g2 + wd * t1
    t2 = t1 - lr * v2
    net = _scalar_net(theta, g1)
    cfg = OptimizerConfig(lr, mu, wd)
    sgd_step(net, cfg, lr)
    net.weight(1).grad[0, 0] = g2
    sgd_step(net, cfg, lr)
    assert net.weight(1).values[0, 0] == pytest.approx(t2, rel=1e-15)


def test_bias_decay_flag():
    net = Network.zeros(NetworkSpec((1, 1)))
    net.bias(1).values[0] = 1.0
    sgd_step(net, OptimizerConfig(0.1, 0.0, 0.5, decay_biases=False), 0.1)
    assert net.bias(1).values[0] == 1.0
    sgd_step(net, OptimizerConfig(0.1, 0.0, 0.5), 0.1)
    assert net.bias(1).values[0] == pytest.approx(0.95)


def test_sgd_decreases_loss_on_convex_problem():
    rng = np.random.default_rng(5)
    net = Network.initialize(NetworkSpec((3, 2)), rng)
    x = rng.normal(size=(20, 3))
    y = (x[:, 0] > 0).astype(int)
    cfg = OptimizerConfig(0.05, 0.0, 0.0)
    previous = math.inf
    for _ in range(30):
        loss, d = loss_ce(net.forward(x), y)
        assert loss < previous
        previous = loss
        net.backward(x, d)
        sgd_step(net, cfg, 0.05)


def test_optimizer_config_validation():
    with pytest.raises(ConfigurationError):
        OptimizerConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(momentum=1.0)
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lr_steps=(40, 20))


# -- schedule -----------------------------------------------------------------

def test_lr_schedule():
    cfg = OptimizerConfig(0.1, lr_steps=(20, 40), lr_gamma=0.1)
    assert lr_at(cfg, 0) == 0.1
    assert lr_at(cfg, 19) == 0.1
    assert lr_at(cfg, 25) == pytest.approx(0.01)
    assert lr_at(cfg, 45) == pytest.approx(0.001)
    flat = OptimizerConfig(0.1, lr_gamma=1.0)
    assert {lr_at(flat, e) for e in range(60)} == {0.1}


# -- initialization -----------------------------------------------------------

def test_init_uniform_bounds_and_determinism():
    a = init_uniform((1000,), 1, np.random.default_rng(4))
    assert a.min() >= -1.0 and a.max() <= 1.0
    b = init_uniform((1000,), 1, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(InputError):
        init_uniform((3,), 0, np.random.default_rng(0))


def test_init_uniform_moments():
    n, b = 10**5, 0.5
    x = init_uniform((n,), 4, np.random.default_rng(9))
    sigma = 2 * b / math.sqrt(12)
    assert abs(x.mean()) < 3 * sigma / math.sqrt(n)
    # Variance of the sample variance for U(-b, b): (mu4 - sigma^4) / n with mu4 = b^4 / 5.
    var_se = math.sqrt((b**4 / 5 - sigma**4) / n)
    assert abs(x.var() - sigma**2) < 3 * var_se


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        net = Network.initialize(NetworkSpec((3, 8, 2)), rng)
        x = rng.normal(size=(16, 3))
        y = rng.integers(0, 2, size=16)
        for _ in range(10):
            _, d = loss_ce(net.forward(x), y)
            net.backward(x, d)
            sgd_step(net, OptimizerConfig(0.1, 0.9, 1e-4), 0.1)
        return net
    assert run().same_parameters(run())


# -- checkpoints --------------------------------------------------------------

@pytest.mark.parametrize("momentum", [False, True])
def test_checkpoint_roundtrip(momentum):
    rng = np.random.default_rng(0)
    net = Network.initialize(NetworkSpec((3, 4, 2)), rng)
    for e in net.entries:
        e.momentum[...] = rng.normal(size=e.values.shape)
    back = read_checkpoint(checkpoint_bytes(net, include_momentum=momentum))
    assert back.same_parameters(net)
    for a, b in zip(net.entries, back.entries):
        expected = a.momentum if momentum else np.zeros_like(a.momentum)
        np.testing.assert_array_equal(b.momentum, expected)


def test_checkpoint_layout():
    net = Network.zeros(NetworkSpec((2, 1)))
    net.weight(1).values[...] = [[1.0], [2.0]]
    buf = io.BytesIO()
    write_checkpoint(net, buf)
    raw = buf.getvalue()
    assert raw[:5] == b"LURE1"
    assert raw[5] == 0
    assert raw[6:18] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (1).to_bytes(4, "little")
    # 4-byte entry count, then layer u32, kind u8, ndim u32, two u32 dims
    assert raw[18:22] == (2).to_bytes(4, "little")
    assert raw[22:31] == (1).to_bytes(4, "little") + b"\x00" + (2).to_bytes(4, "little")
    assert raw[39:55] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ParseError, match="byte 0"):
        read_checkpoint(b"NOPE!" + b"\x00" * 10)
    good = checkpoint_bytes(Network.zeros(NetworkSpec((2, 1))))
    with pytest.raises(ParseError, match="truncated"):
        read_checkpoint(good[:-3])
