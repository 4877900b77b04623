import math

import numpy as np
import pytest

from coastfl import oracles
from coastfl.errors import StructuralError, TrainingError
from coastfl.model import (
    ModelArch,
    TrainConfig,
    accuracy,
    backward,
    forward_loss,
    init_params,
    local_train,
)
from coastfl.params import LayeredParams, flatten, unflatten

SMALL = ModelArch(input_dim=6, hidden_dims=(5,), n_classes=3)


def batch(arch, n, seed):
    rng = np.random.default_rng(seed)
    return rng.random((n, arch.input_dim)), rng.integers(0, arch.n_classes, n)


def test_layout_matches_architecture():
    assert ModelArch().layout == (("W1", 256 * 64), ("b1", 64), ("W2", 64 * 4), ("b2", 4))


def test_init_deterministic_and_scaled():
    arch = ModelArch()
    a, b = init_params(arch, 5), init_params(arch, 5)
    assert a.bit_equal(b)
    assert not a.bit_equal(init_params(arch, 6))
    assert not np.any(a.layer("b1")) and not np.any(a.layer("b2"))
    for name, fan_in in (("W1", 256), ("W2", 64)):
        std = a.layer(name).std()
        assert abs(std - 1 / math.sqrt(fan_in)) < 0.2 / math.sqrt(fan_in)


def test_uniform_logits_give_log_classes():
    arch = ModelArch()
    zero = LayeredParams.zeros(arch.layout)
    x, y = batch(arch, 8, 0)
    loss, _ = forward_loss(zero, arch, x, y)
    assert loss == pytest.approx(math.log(4), abs=1e-12)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_forward_matches_independent_oracle(activation):
    arch = ModelArch(input_dim=6, hidden_dims=(5, 4), n_classes=3, activation=activation)
    p = init_params(arch, 2)
    x, y = batch(arch, 7, 1)
    loss, _ = forward_loss(p, arch, x, y)
    assert loss == pytest.approx(oracles.mlp_loss(flatten(p), arch.dims, x, y, activation), abs=1e-12)


def test_output_bias_gradient_is_mean_residual():
    arch = SMALL
    p = init_params(arch, 3)
    x, y = batch(arch, 9, 2)
    g = backward(p, arch, x, y)
    h = np.maximum(x @ p.layer("W1").reshape(6, 5) + p.layer("b1"), 0)
    z = h @ p.layer("W2").reshape(5, 3) + p.layer("b2")
    prob = np.exp(z - z.max(1, keepdims=True))
    prob /= prob.sum(1, keepdims=True)
    expected = (prob - np.eye(3)[y]).mean(axis=0)
    assert np.allclose(g.layer("b2"), expected, atol=1e-15)


@pytest.mark.parametrize("seed,activation", [(0, "relu"), (1, "relu"), (2, "tanh")])
def test_gradient_matches_central_difference(seed, activation):
    arch = ModelArch(input_dim=6, hidden_dims=(5, 4), n_classes=3, activation=activation)
    p = init_params(arch, seed)
    x, y = batch(arch, 5, seed + 10)
    analytic = flatten(backward(p, arch, x, y))
    numeric = oracles.central_difference(lambda f: oracles.mlp_loss(f, arch.dims, x, y, activation), flatten(p))
    assert oracles.relative_error(analytic, numeric) <= 1e-4


def test_zero_inputs_give_zero_first_layer_weight_gradient():
    arch = SMALL
    p = init_params(arch, 4)
    g = backward(p, arch, np.zeros((4, 6)), np.array([0, 1, 2, 0]))
    assert not np.any(g.layer("W1"))


def test_shape_errors():
    p = init_params(SMALL, 0)
    with pytest.raises(StructuralError):
        forward_loss(p, SMALL, np.zeros((2, 7)), np.zeros(2, dtype=int))
    with pytest.raises(StructuralError):
        forward_loss(p, SMALL, np.zeros((0, 6)), np.zeros(0, dtype=int))
    with pytest.raises(StructuralError):
        forward_loss(init_params(ModelArch(), 0), SMALL, np.zeros((2, 6)), np.zeros(2, dtype=int))


def test_local_train_zero_epochs_and_zero_lr():
    p = init_params(SMALL, 0)
    x, y = batch(SMALL, 20, 0)
    assert local_train(p, SMALL, x, y, TrainConfig(local_epochs=0), 0.1, 1).bit_equal(p)
    assert local_train(p, SMALL, x, y, TrainConfig(), 0.0, 1).bit_equal(p)


def test_single_full_batch_step_is_gradient_step():
    p = init_params(SMALL, 0)
    x, y = batch(SMALL, 20, 0)
    out = local_train(p, SMALL, x, y, TrainConfig(batch_size=20), 0.05, 1)
    g = backward(p, SMALL, x, y)
    expected = LayeredParams(p.names, tuple(v - 0.05 * gv for v, gv in zip(p.values, g.values)))
    assert out.bit_equal(expected)


def test_local_train_pure_and_deterministic():
    p = init_params(SMALL, 0)
    snapshot = flatten(p).copy()
    x, y = batch(SMALL, 50, 0)
    a = local_train(p, SMALL, x, y, TrainConfig(batch_size=8), 0.1, 7)
    b = local_train(p, SMALL, x, y, TrainConfig(batch_size=8), 0.1, 7)
    assert a.bit_equal(b)
    assert flatten(p).tobytes() == snapshot.tobytes()
    assert not a.bit_equal(local_train(p, SMALL, x, y, TrainConfig(batch_size=8), 0.1, 8))


def test_local_train_divergence_raises():
    p = init_params(SMALL, 0)
    x, y = batch(SMALL, 20, 0)
    with pytest.raises(TrainingError) as info, np.errstate(over="ignore", invalid="ignore"):
        local_train(p, SMALL, x * 1e300, y, TrainConfig(batch_size=5), 1e300, 1, round_idx=3, client=2)
    assert (info.value.round_idx, info.value.client) == (3, 2)
    with pytest.raises(TrainingError):
        local_train(p, SMALL, np.zeros((0, 6)), np.zeros(0, dtype=int), TrainConfig(), 0.1, 1)


def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert cfg.learning_rate(1) == 0.01
    assert cfg.learning_rate(3) == pytest.approx(0.01 * 0.99 ** 2)


def test_random_init_accuracy_near_chance():
    arch = ModelArch()
    rng = np.random.default_rng(0)
    x = rng.random((4000, 256))
    y = rng.integers(0, 4, 4000)
    accs = [accuracy(init_params(arch, s), arch, x, y) for s in range(5)]
    assert abs(np.mean(accs) - 0.25) < 0.05


def test_memorizes_small_set():
    arch = ModelArch()
    x, y = batch(arch, 10, 3)
    p = init_params(arch, 0)
    for epoch in range(200):
        p = local_train(p, arch, x, y, TrainConfig(batch_size=10), 0.05, epoch)
    assert accuracy(p, arch, x, y) == 1.0


def test_accuracy_ties_go_to_lowest_class():
    zero = LayeredParams.zeros(SMALL.layout)
    x = np.ones((3, 6))
    assert accuracy(zero, SMALL, x, np.array([0, 0, 0])) == 1.0
    assert accuracy(zero, SMALL, x, np.array([1, 2, 1])) == 0.0


def test_unflatten_model_roundtrip():
    p = init_params(SMALL, 9)
    assert unflatten(flatten(p), SMALL.layout).bit_equal(p)
