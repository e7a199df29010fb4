import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modimpute.nncore import (
    PROB_EPS,
    AdamW,
    MlpParams,
    NumericError,
    ShapeError,
    clip_weights,
    cross_entropy,
    gan_discriminator_loss,
    gan_generator_loss,
    grad_reverse,
    init_mlp,
    load_params,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    numeric_grad,
    save_params,
    wgan_critic_loss,
    zeros_like_params,
)


def identity_net(d=2):
    return MlpParams([d, d], [np.eye(d)], [np.zeros(d)], output_activation="linear")


# --- forward ------------------------------------------------------------------

def test_zero_net_gives_zero_output():
    net = zeros_like_params(init_mlp([5, 4, 3], np.random.default_rng(0)))
    assert np.array_equal(mlp_forward(net, np.arange(5.0)), np.zeros(3))


def test_identity_layer():
    out = mlp_forward(identity_net(), [1.5, -2.0])
    assert out.tolist() == [1.5, -2.0]


def test_two_layer_matches_hand_rolled_chain():
    rng = np.random.default_rng(7)
    net = init_mlp([6, 5, 3], rng, hidden_activation="leaky_relu")
    net.biases = [rng.normal(size=b.shape) for b in net.biases]
    x = rng.normal(size=6)
    # independent oracle: explicit loops, no numpy matmul
    h = []
    for i in range(5):
        z = sum(net.weights[0][i, j] * x[j] for j in range(6)) + net.biases[0][i]
        h.append(z if z > 0 else 0.01 * z)
    want = [sum(net.weights[1][i, j] * h[j] for j in range(5)) + net.biases[1][i] for i in range(3)]
    np.testing.assert_allclose(mlp_forward(net, x), want, rtol=0, atol=1e-12)


def test_sigmoid_output_in_unit_interval():
    net = init_mlp([4, 8, 1], np.random.default_rng(1), output_activation="sigmoid")
    out = mlp_forward(net, np.random.default_rng(2).normal(size=(50, 4)) * 10)
    assert np.all(out > 0) and np.all(out < 1)


def test_forward_errors():
    net = identity_net(3)
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(2))
    with pytest.raises(NumericError):
        mlp_forward(net, [0.0, np.nan, 1.0])


def test_bad_params_rejected():
    with pytest.raises(ShapeError):
        MlpParams([2, 3], [np.zeros((2, 3))], [np.zeros(3)])


# --- backward -----------------------------------------------------------------

def test_zero_output_grad_gives_zero_grads():
    net = init_mlp([4, 6, 3], np.random.default_rng(0))
    _, tape = mlp_forward(net, np.ones(4), record=True)
    grads, gin = mlp_backward(net, tape, np.zeros(3))
    assert all(not np.any(t) for t in grads.tensors())
    assert not np.any(gin)


def test_identity_backward():
    net = identity_net()
    x = np.array([1.5, -2.0])
    g = np.array([0.3, 0.7])
    _, tape = mlp_forward(net, x, record=True)
    grads, gin = mlp_backward(net, tape, g)
    np.testing.assert_array_equal(gin, g)
    np.testing.assert_array_equal(grads.weights[0], np.outer(g, x))
    np.testing.assert_array_equal(grads.biases[0], g)


def test_tape_single_use_and_arch_check():
    net = init_mlp([3, 2], np.random.default_rng(0))
    _, tape = mlp_forward(net, np.ones(3), record=True)
    mlp_backward(net, tape, np.ones(2))
    with pytest.raises(RuntimeError):
        mlp_backward(net, tape, np.ones(2))
    other = init_mlp([3, 4, 2], np.random.default_rng(0))
    _, tape = mlp_forward(net, np.ones(3), record=True)
    with pytest.raises(ShapeError):
        mlp_backward(other, tape, np.ones(2))


@pytest.mark.parametrize("hidden", ["leaky_relu", "tanh", "relu"])
@pytest.mark.parametrize("output", ["linear", "sigmoid", "tanh"])
def test_three_layer_gradients_match_finite_differences(hidden, output):
    rng = np.random.default_rng(11)
    net = init_mlp([5, 7, 6, 3], rng, hidden_activation=hidden, output_activation=output)
    x = rng.normal(size=(4, 5))
    probe = rng.normal(size=(4, 3))

    def loss():
        return float(np.sum(probe * mlp_forward(net, x)))

    _, tape = mlp_forward(net, x, record=True)
    grads, gin = mlp_backward(net, tape, probe)
    for p, g in zip(net.tensors(), grads.tensors()):
        assert max_relative_error(g, numeric_grad(loss, p)) < 1e-4
    assert max_relative_error(gin, numeric_grad(loss, x)) < 1e-4


# --- gradient reversal ------------------------------------------------------------

def test_grad_reverse_examples():
    assert grad_reverse([1.0, -2.0], 1.0).tolist() == [-1.0, 2.0]
    assert not np.any(grad_reverse([3.0, -4.0], 0.0))
    assert grad_reverse([0.5], 2.0).tolist() == [-1.0]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20), st.floats(0, 10))
def test_grad_reverse_is_negated_scaling(g, lam):
    g = np.array(g)
    np.testing.assert_array_equal(grad_reverse(g, lam), -lam * g)


# --- losses -------------------------------------------------------------------

def test_cross_entropy_uniform():
    loss, grad = cross_entropy([0.0, 0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    np.testing.assert_allclose(grad, [1 / 3 - 1, 1 / 3, 1 / 3])


def test_cross_entropy_saturated_is_stable():
    loss, grad = cross_entropy([1000.0, 0.0, 0.0], 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_cross_entropy_direct_formula():
    z = [0.3, -1.2, 0.7]
    want = -math.log(math.exp(0.7) / sum(math.exp(v) for v in z))
    loss, _ = cross_entropy(z, 2)
    assert abs(loss - want) < 1e-10


def test_cross_entropy_errors():
    with pytest.raises(ShapeError):
        cross_entropy([], 0)
    with pytest.raises(ShapeError):
        cross_entropy([1.0, 2.0], 2)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.data())
def test_cross_entropy_grad_sums_to_zero(z, data):
    label = data.draw(st.integers(0, len(z) - 1))
    loss, grad = cross_entropy(z, label)
    assert loss >= 0
    assert abs(grad.sum()) < 1e-12


def test_cross_entropy_batch_grad_fd():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    _, g = cross_entropy(z, y)
    num = numeric_grad(lambda: cross_entropy(z, y)[0], z)
    assert max_relative_error(g, num) < 1e-6


def test_discriminator_loss_examples():
    assert gan_discriminator_loss(1 - PROB_EPS, PROB_EPS)[0] == pytest.approx(0.0, abs=1e-6)
    assert gan_discriminator_loss(0.5, 0.5)[0] == pytest.approx(2 * math.log(2), abs=1e-12)
    assert gan_discriminator_loss(0.9, 0.2)[0] == pytest.approx(-math.log(0.9) - math.log(0.8), abs=1e-12)
    assert gan_discriminator_loss(0.9, 0.2)[0] == pytest.approx(0.3285, abs=1e-4)


def test_discriminator_loss_clamps():
    loss, (gr, gf) = gan_discriminator_loss(0.0, 1.0)
    assert np.isfinite(loss) and np.isfinite(gr) and np.isfinite(gf)
    assert loss == pytest.approx(-2 * math.log(PROB_EPS), rel=1e-6)


def test_generator_loss_examples():
    assert gan_generator_loss(1 - PROB_EPS)[0] == pytest.approx(0.0, abs=1e-6)
    assert gan_generator_loss(0.5)[0] == pytest.approx(math.log(2), abs=1e-12)
    assert gan_generator_loss(0.25)[0] == pytest.approx(-math.log(0.25), abs=1e-12)
    assert gan_generator_loss(0.25)[0] == pytest.approx(1.3863, abs=1e-4)


def test_gan_loss_grads_fd():
    r, f = 0.7, 0.35
    _, (gr, gf) = gan_discriminator_loss(r, f)
    h = 1e-6
    assert gr == pytest.approx((gan_discriminator_loss(r + h, f)[0] - gan_discriminator_loss(r - h, f)[0]) / (2 * h), rel=1e-6)
    assert gf == pytest.approx((gan_discriminator_loss(r, f + h)[0] - gan_discriminator_loss(r, f - h)[0]) / (2 * h), rel=1e-6)
    _, g = gan_generator_loss(f)
    assert g == pytest.approx((gan_generator_loss(f + h)[0] - gan_generator_loss(f - h)[0]) / (2 * h), rel=1e-6)


def test_wgan_critic_loss_and_clip():
    assert wgan_critic_loss(1.3, 1.3) == 0.0
    assert wgan_critic_loss(2.0, 0.5) == -1.5
    rng = np.random.default_rng(0)
    net = init_mlp([4, 5, 1], rng)
    net.weights = [rng.uniform(-1, 1, size=w.shape) for w in net.weights]
    clip_weights(net, 0.01)
    assert max(np.abs(t).max() for t in net.tensors()) == 0.01


# --- AdamW --------------------------------------------------------------------

def scalar_net(w):
    return MlpParams([1, 1], [np.array([[w]])], [np.zeros(1)])


def test_adamw_decay_only_step():
    net = scalar_net(1.0)
    opt = AdamW(lr=1e-3, weight_decay=0.01)
    opt.step(net, zeros_like_params(net))
    assert net.weights[0][0, 0] == pytest.approx(0.99999, abs=1e-15)
    assert opt.step_count == 1


def test_adamw_first_step_magnitude_is_lr():
    net = scalar_net(0.5)
    grads = scalar_net(1.0)
    AdamW(lr=1e-3, weight_decay=0.0).step(net, grads)
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> update lr * g / (|g| + eps)
    assert 0.5 - net.weights[0][0, 0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)


def test_adamw_descends_quadratic():
    net = scalar_net(1.0)
    opt = AdamW(lr=1e-3, weight_decay=0.0)
    prev = 1.0
    for _ in range(1000):
        w = net.weights[0][0, 0]
        opt.step(net, scalar_net(2 * w))
        cur = abs(net.weights[0][0, 0])
        assert cur < prev
        prev = cur


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        AdamW().step(init_mlp([2, 3], np.random.default_rng(0)), init_mlp([2, 4], np.random.default_rng(0)))


def test_adamw_state_roundtrip():
    rng = np.random.default_rng(0)
    net = init_mlp([3, 4, 2], rng)
    opt = AdamW()
    for _ in range(3):
        opt.step(net, init_mlp([3, 4, 2], rng))
    restored = AdamW.from_state_dict(json.loads(json.dumps(opt.state_dict())), net)
    assert restored.step_count == 3
    for a, b in zip(opt.first_moment + opt.second_moment, restored.first_moment + restored.second_moment):
        np.testing.assert_array_equal(a, b)


# --- determinism and checkpoints ---------------------------------------------------

def _train(seed):
    rng = np.random.default_rng(seed)
    net = init_mlp([4, 8, 3], rng)
    opt = AdamW()
    x = rng.normal(size=(16, 4))
    y = rng.integers(0, 3, 16)
    for _ in range(20):
        out, tape = mlp_forward(net, x, record=True)
        _, g = cross_entropy(out, y)
        grads, _ = mlp_backward(net, tape, g)
        opt.step(net, grads)
    return net


def test_training_is_bit_deterministic():
    a, b = _train(5), _train(5)
    for x, y in zip(a.tensors(), b.tensors()):
        assert np.array_equal(x, y)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = _train(1)
    opt = AdamW()
    save_params(net, tmp_path / "net.json", optimizer=opt)
    doc = json.loads((tmp_path / "net.json").read_text())
    assert doc["schema_version"] == 1 and doc["layer_dims"] == [4, 8, 3]
    back = load_params(tmp_path / "net.json")
    for x, y in zip(net.tensors(), back.tensors()):
        assert np.array_equal(x, y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_params_stay_finite_and_shaped(seed):
    rng = np.random.default_rng(seed)
    dims = list(rng.integers(1, 6, size=rng.integers(2, 5)))
    net = init_mlp(dims, rng)
    assert net.is_finite()
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        assert w.shape == (dims[i + 1], dims[i]) and b.shape == (dims[i + 1],)
