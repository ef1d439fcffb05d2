import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import probe
from uilab.errors import TrainingError, ValidationError
from uilab.model import (
    ArchSpec,
    Dataset,
    OptimizerState,
    ParamVector,
    Sample,
    TrainConfig,
    accuracy,
    flatten,
    forward,
    grad_input,
    grad_params,
    init_params,
    loss,
    optimizer_step,
    param_vjp,
    train,
    unflatten,
)


def _linear_identity():
    arch = ArchSpec((1, 2, 1), (), 2)
    return ParamVector(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), arch)


def test_param_count_hand():
    arch = ArchSpec((1, 4, 1), (3,), 2)
    assert arch.num_params == (4 + 1) * 3 + (3 + 1) * 2 == 23


def test_init_deterministic_and_zero_bias(tiny_arch):
    a, b = init_params(tiny_arch, 5), init_params(tiny_arch, 5)
    assert np.array_equal(a.values, b.values)
    for _, bias in unflatten(tiny_arch, a.values):
        assert not np.any(bias)
    assert not np.array_equal(a.values, init_params(tiny_arch, 6).values)


@pytest.mark.parametrize("bad", [
    dict(input_dims=(0, 2, 1)),
    dict(input_dims=(2, 2)),
    dict(input_dims=(2, 2, 1), num_classes=1),
    dict(input_dims=(2, 2, 1), hidden_widths=(0,)),
    dict(input_dims=(2, 2, 1), activation="gelu"),
])
def test_archspec_rejects(bad):
    with pytest.raises(ValidationError):
        ArchSpec(**bad)


def test_paramvector_rejects_bad_length_and_nan(tiny_arch):
    with pytest.raises(ValidationError):
        ParamVector(np.zeros(3), tiny_arch)
    v = np.zeros(tiny_arch.num_params)
    v[0] = np.nan
    with pytest.raises(ValidationError):
        ParamVector(v, tiny_arch)


def test_sample_bounds():
    with pytest.raises(ValidationError):
        Sample(np.array([[[1.5]]]), 0)


def test_forward_identity_weights():
    theta = _linear_identity()
    assert np.allclose(forward(theta, np.array([0.5, 0.25])), [0.5, 0.25])


def test_forward_zero_params(tiny_arch):
    theta = ParamVector(np.zeros(tiny_arch.num_params), tiny_arch)
    assert not np.any(forward(theta, np.full(9, 0.3)))


def test_forward_hand_2_2_2():
    # scalar evaluation written out independently
    arch = ArchSpec((1, 2, 1), (2,), 2)
    W1 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b1 = np.array([0.1, -0.2])
    W2 = np.array([[1.0, -0.5], [0.3, 0.7]])
    b2 = np.array([0.05, 0.0])
    theta = ParamVector(flatten([(W1, b1), (W2, b2)]), arch)
    x = [0.4, 0.8]
    h0 = np.tanh(0.5 * 0.4 - 1.0 * 0.8 + 0.1)
    h1 = np.tanh(2.0 * 0.4 + 0.25 * 0.8 - 0.2)
    expect = [1.0 * h0 - 0.5 * h1 + 0.05, 0.3 * h0 + 0.7 * h1]
    assert np.allclose(forward(theta, x), expect, rtol=0, atol=1e-15)


def test_loss_values():
    arch = ArchSpec((1, 3, 1), (), 3)
    # zero weights, biases = logits
    def with_bias(b):
        return ParamVector(np.concatenate([np.zeros(9), b]), arch)
    x = np.zeros(3)
    assert loss(with_bias(np.zeros(3)), x, 1) == pytest.approx(np.log(3))
    arch4 = ArchSpec((1, 2, 1), (), 4)
    uniform = ParamVector(np.zeros(arch4.num_params), arch4)
    assert loss(uniform, np.zeros(2), 2) == pytest.approx(np.log(4), abs=1e-15)
    assert loss(with_bias(np.array([1.0, 2.0, 3.0])), x, 0) == pytest.approx(2.4076059644, abs=1e-9)
    big = loss(with_bias(np.array([1000.0, 0.0, 0.0])), x, 0)
    assert np.isfinite(big) and big < 1e-12
    huge = loss(with_bias(np.array([-1e4, 1e4, 0.0])), x, 0)
    assert huge == pytest.approx(2e4)


def test_flatten_roundtrip(tiny_theta):
    v = tiny_theta.values
    assert np.array_equal(flatten(unflatten(tiny_theta.arch, v)), v)
    stack = np.stack([v, 2 * v])
    assert np.array_equal(flatten(unflatten(tiny_theta.arch, stack)), stack)


def test_flatten_order_documented():
    arch = ArchSpec((1, 2, 1), (), 2)
    v = np.arange(6.0)
    (W, b), = unflatten(arch, v)
    assert np.array_equal(W, [[0, 1], [2, 3]]) and np.array_equal(b, [4, 5])


def test_grads_fd_tanh(tiny_arch, tiny_sample):
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = init_params(tiny_arch, int(rng.integers(1 << 30)))
        x = tiny_sample
        g = grad_params(theta, x)
        e = probe(lambda v: loss(theta.with_values(v), x), g, theta.values, rng)
        assert e < 1e-6
        gx = grad_input(theta, x)
        e = probe(lambda p: loss(theta, p, x.label), gx, x.flat, rng)
        assert e < 1e-6
        s = rng.standard_normal(3)
        gv = param_vjp(theta, x, s)
        e = probe(lambda v: float(forward(theta.with_values(v), x) @ s), gv, theta.values, rng)
        assert e < 1e-6


def test_grad_input_zero_first_layer(tiny_theta, tiny_sample):
    v = tiny_theta.values.copy()
    v[: 9 * 5] = 0.0
    assert not np.any(grad_input(tiny_theta.with_values(v), tiny_sample))


def test_param_vjp_zero_seed(tiny_theta, tiny_sample):
    assert not np.any(param_vjp(tiny_theta, tiny_sample, np.zeros(3)))


def test_label_range(tiny_theta, tiny_sample):
    with pytest.raises(ValidationError):
        loss(tiny_theta, tiny_sample.pixels, 3)


def test_pure(tiny_theta, tiny_sample):
    assert np.array_equal(grad_params(tiny_theta, tiny_sample), grad_params(tiny_theta, tiny_sample))


def test_sgd_steps():
    st_ = OptimizerState("sgd", 0.1, 1)
    st2, p = optimizer_step(st_, np.array([1.0]), np.array([2.0]))
    assert p[0] == pytest.approx(0.8) and st2.t == 1 and st_.t == 0
    _, p = optimizer_step(st_, np.array([1.0]), np.array([0.0]))
    assert p[0] == 1.0


@given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
@settings(max_examples=30, deadline=None)
def test_adam_first_step_is_lr(g):
    s = OptimizerState("adam", 1e-3, 1)
    s2, p = optimizer_step(s, np.array([0.0]), np.array([g]))
    assert abs(p[0]) == pytest.approx(1e-3, rel=1e-4)
    assert np.sign(p[0]) == -np.sign(g) and s2.t == 1


def test_optimizer_validation():
    with pytest.raises(ValidationError):
        OptimizerState("rmsprop", 0.1, 1)
    with pytest.raises(ValidationError):
        OptimizerState("sgd", 0.0, 1)
    with pytest.raises(ValidationError):
        optimizer_step(OptimizerState("sgd", 0.1, 2), np.zeros(3), np.zeros(3))


def _toy_separable(n=40):
    rng = np.random.default_rng(1)
    y = np.arange(n) % 2
    imgs = np.where(y[:, None] == 0, 0.2, 0.8) + rng.uniform(-0.1, 0.1, (n, 4))
    return Dataset(imgs.reshape(n, 2, 2, 1), y)


def test_train_separable_and_deterministic():
    ds = _toy_separable()
    arch = ArchSpec((2, 2, 1), (4,), 2)
    cfg = TrainConfig(lr=0.05, epochs=30, batch=8)
    a = train(ds, arch, cfg)
    assert accuracy(a, ds) == 1.0
    assert np.array_equal(a.values, train(ds, arch, cfg).values)


def test_train_zero_epochs_is_init():
    arch = ArchSpec((2, 2, 1), (4,), 2)
    theta = train(_toy_separable(), arch, TrainConfig(epochs=0, seed=9))
    assert np.array_equal(theta.values, init_params(arch, 9).values)


def test_train_floor():
    ds = _toy_separable()
    arch = ArchSpec((2, 2, 1), (4,), 2)
    with pytest.raises(TrainingError, match="accuracy"):
        train(ds, arch, TrainConfig(lr=1e-9, epochs=1, acc_floor=1.01))


def test_accuracy_counts():
    theta = _linear_identity()
    imgs = np.array([[0.9, 0.1], [0.1, 0.9], [0.8, 0.2], [0.3, 0.7]]).reshape(4, 1, 2, 1)
    assert accuracy(theta, Dataset(imgs[:1], np.array([0]))) == 1.0
    assert accuracy(theta, Dataset(imgs, np.array([1, 0, 1, 0]))) == 0.0
    assert accuracy(theta, Dataset(imgs, np.array([0, 1, 0, 0]))) == 0.75
