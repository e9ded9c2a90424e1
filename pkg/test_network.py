"""Tests for the MLP forward/backward passes, Adam and checkpoints."""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from errors import CheckpointError, ValidationError
from loss import LossMode, SteepnessConfig, training_objective
from metrics import CostModel
from network import (CHECKPOINT_MAGIC, AdamConfig, AdamState, GradientSet, MlpModel, apply_update, backward,
                     default_dims, forward, forward_batch, init_model, load_model, save_model)

SMALL_DIMS = (8, 4, 3, 2, 1)


def _reference_forward(model, x):
    """Plain-Python loop over neurons, no numpy reductions."""
    a = [float(v) for v in x]
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = []
        for row, bias in zip(w, b):
            total = 0.0
            for weight, value in zip(row, a):
                total += float(weight) * value
            z.append(total + float(bias))
        if layer < model.n_layers - 1:
            a = [v if v > 0 else model.leaky_slope * v for v in z]
        else:
            return 1.0 / (1.0 + math.exp(-z[0]))


def _with_parameter(model, index, position, delta):
    params = [p.copy() for p in model.parameters()]
    params[index][position] += delta
    return replace(model, weights=tuple(params[0::2]), biases=tuple(params[1::2]))


def test_default_dims():
    assert default_dims() == (544, 256, 128, 64, 1)
    assert default_dims(24, (8, 4)) == (24, 8, 4, 1)


def test_zero_parameters_give_one_half():
    model = init_model(SMALL_DIMS, seed=0)
    zero = replace(model, weights=tuple(np.zeros_like(w) for w in model.weights))
    assert forward(zero, np.arange(8.0)) == 0.5


def test_single_unit_head_is_a_sigmoid():
    model = MlpModel((1, 1), (np.ones((1, 1)),), (np.zeros(1),))
    for x in (-2.0, 0.0, 0.7):
        assert forward(model, [x]) == pytest.approx(expit(x), abs=1e-15)


def test_forward_matches_reference_loop(rng):
    """Test the vectorized forward pass against an explicit per-layer loop."""
    model = init_model((6, 5, 4, 1), seed=4)
    model = replace(model, biases=tuple(rng.normal(size=b.shape) for b in model.biases))
    for _ in range(10):
        x = rng.normal(size=6)
        assert forward(model, x) == pytest.approx(_reference_forward(model, x), abs=1e-12)


def test_output_strictly_inside_unit_interval():
    model = MlpModel((1, 1), (np.full((1, 1), 1e3),), (np.zeros(1),))
    high, low = forward(model, [1e3]), forward(model, [-1e3])
    assert 0.0 < low < high < 1.0


def test_forward_rejects_wrong_dimension():
    model = init_model(SMALL_DIMS)
    with pytest.raises(ValidationError, match="expects 8"):
        forward(model, np.zeros(5))
    with pytest.raises(ValidationError):
        forward_batch(model, np.zeros((3, 7)))


def test_batch_matches_row_loop_exactly(rng):
    """Test that batch scoring is bit-identical to scoring row by row."""
    model = init_model(default_dims(24, (16, 8, 4)), seed=1)
    batch = rng.normal(size=(1024, 24))
    batched = forward_batch(model, batch)
    looped = np.array([forward(model, row) for row in batch])
    assert np.array_equal(batched, looped)
    assert forward_batch(model, batch[:1])[0] == forward(model, batch[0])


def test_batch_permutation_permutes_scores(rng):
    model = init_model(SMALL_DIMS, seed=2)
    batch = rng.normal(size=(50, 8))
    perm = rng.permutation(50)
    assert np.array_equal(forward_batch(model, batch[perm]), forward_batch(model, batch)[perm])


def test_init_is_deterministic():
    first, second = init_model(SMALL_DIMS, seed=9), init_model(SMALL_DIMS, seed=9)
    assert first.same_as(second)
    assert not first.same_as(init_model(SMALL_DIMS, seed=10))
    assert all(np.all(b == 0.0) for b in first.biases)


def test_init_weight_spread_matches_scaled_uniform():
    model = init_model((256, 200, 1), seed=0)
    expected = 1.0 / math.sqrt(256) / math.sqrt(3.0)
    assert np.std(model.weights[0]) == pytest.approx(expected, rel=0.05)
    assert np.max(np.abs(model.weights[0])) <= 1.0 / 16.0


@pytest.mark.parametrize("dims", [(4,), (4, 0, 1), (4, -2, 1)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValidationError):
        init_model(dims)


def test_model_validates_shapes_and_output_width():
    with pytest.raises(ValidationError, match="Output layer width"):
        MlpModel((2, 2), (np.zeros((2, 2)),), (np.zeros(2),))
    with pytest.raises(ValidationError):
        MlpModel((2, 1), (np.zeros((2, 1)),), (np.zeros(1),))
    with pytest.raises(ValidationError):
        MlpModel((2, 1), (np.array([[np.nan, 0.0]]),), (np.zeros(1),))


def test_zero_upstream_gives_zero_gradients(rng):
    model = init_model(SMALL_DIMS, seed=3)
    grads = backward(model, rng.normal(size=(5, 8)), np.zeros(5))
    assert all(np.all(g == 0.0) for g in grads.parameters())


def test_backward_rejects_mismatched_upstream(rng):
    with pytest.raises(ValidationError):
        backward(init_model(SMALL_DIMS), rng.normal(size=(5, 8)), np.ones(4))


def test_duplicated_rows_double_the_gradient(rng):
    model = init_model(SMALL_DIMS, seed=5)
    x = rng.normal(size=(1, 8))
    single = backward(model, x, [0.7])
    double = backward(model, np.vstack([x, x]), [0.7, 0.7])
    for a, b in zip(single.parameters(), double.parameters()):
        np.testing.assert_allclose(b, 2.0 * a, rtol=1e-12, atol=0.0)


def test_backward_matches_finite_differences_for_linear_upstream(rng):
    model = init_model(SMALL_DIMS, seed=6)
    model = replace(model, biases=tuple(rng.normal(0.0, 0.1, size=b.shape) for b in model.biases))
    x = rng.normal(size=(6, 8))
    upstream = rng.normal(size=6)

    def objective(m):
        return float(np.dot(upstream, forward_batch(m, x)))

    grads = backward(model, x, upstream).parameters()
    h = 1e-6
    for index, param in enumerate(model.parameters()):
        for position in np.ndindex(param.shape):
            numeric = (objective(_with_parameter(model, index, position, h))
                       - objective(_with_parameter(model, index, position, -h))) / (2 * h)
            assert grads[index][position] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("mode", list(LossMode))
def test_backward_matches_finite_differences_for_each_loss(mode):
    """Test backpropagated parameter gradients for every training loss."""
    rng = np.random.default_rng(31)
    model = init_model(SMALL_DIMS, seed=7)
    x = rng.normal(size=(9, 8))
    codes = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    cm, steep = CostModel(), SteepnessConfig(2.0)

    def objective(m):
        return training_objective(forward_batch(m, x), codes, 0.5, cm, steep, mode)[0]

    _, score_grad = training_objective(forward_batch(model, x), codes, 0.5, cm, steep, mode)
    grads = backward(model, x, score_grad).parameters()
    h = 1e-6
    for index, param in enumerate(model.parameters()):
        for position in np.ndindex(param.shape):
            numeric = (objective(_with_parameter(model, index, position, h))
                       - objective(_with_parameter(model, index, position, -h))) / (2 * h)
            assert grads[index][position] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_adam_zero_gradient_leaves_parameters_unchanged():
    model = init_model(SMALL_DIMS, seed=8)
    updated, state = apply_update(model, GradientSet.zeros_like(model), AdamState.fresh(model))
    assert updated.same_as(model)
    assert state.step == 1
    assert all(np.all(m == 0.0) for m in state.first_moments)


def test_adam_first_step_moves_by_learning_rate():
    """Test that the first Adam step moves each parameter by about the learning rate."""
    model = init_model(SMALL_DIMS, seed=8)
    ones = GradientSet(tuple(np.ones_like(w) for w in model.weights), tuple(np.ones_like(b) for b in model.biases))
    config = AdamConfig(learning_rate=1e-4)
    updated, _ = apply_update(model, ones, AdamState.fresh(model), config)
    for before, after in zip(model.parameters(), updated.parameters()):
        np.testing.assert_allclose(after - before, -1e-4, rtol=0.0, atol=2e-12)


def test_adam_is_deterministic_and_pure(rng):
    model = init_model(SMALL_DIMS, seed=8)
    grads = backward(model, rng.normal(size=(4, 8)), rng.normal(size=4))
    state = AdamState.fresh(model)
    first, first_state = apply_update(model, grads, state)
    second, second_state = apply_update(model, grads, state)
    assert first.same_as(second)
    assert first_state.step == second_state.step == 1
    assert state.step == 0


def test_adam_rejects_mismatched_gradients():
    model = init_model(SMALL_DIMS)
    other = init_model((8, 4, 1))
    with pytest.raises(ValidationError):
        apply_update(model, GradientSet.zeros_like(other), AdamState.fresh(model))


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0.0), dict(beta1=1.0), dict(epsilon=0.0)])
def test_adam_config_validation(kwargs):
    with pytest.raises(ValidationError):
        AdamConfig(**kwargs)


def test_checkpoint_round_trip(tmp_path):
    """Test saving and loading a checkpoint with its threshold."""
    model = init_model(SMALL_DIMS, leaky_slope=0.02, seed=12).with_threshold(0.4375)
    path = save_model(model, tmp_path / "model.adcf")
    loaded = load_model(path, expected_dims=SMALL_DIMS)
    assert loaded.same_as(model)
    assert loaded.threshold == 0.4375 and loaded.leaky_slope == 0.02


def test_checkpoint_bad_magic(tmp_path):
    path = save_model(init_model(SMALL_DIMS), tmp_path / "model.adcf")
    data = bytearray(path.read_bytes())
    data[:len(CHECKPOINT_MAGIC)] = b"NOT-MLP!"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="bad magic"):
        load_model(path)


def test_checkpoint_version_mismatch(tmp_path):
    path = save_model(init_model(SMALL_DIMS), tmp_path / "model.adcf")
    data = bytearray(path.read_bytes())
    data[8:12] = (2).to_bytes(4, "little")
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version 2"):
        load_model(path)


def test_checkpoint_dims_mismatch_reported(tmp_path):
    path = save_model(init_model(SMALL_DIMS), tmp_path / "model.adcf")
    with pytest.raises(CheckpointError, match=r"\(8, 4, 3, 2, 1\)"):
        load_model(path, expected_dims=(10, 4, 1))


def test_checkpoint_truncated(tmp_path):
    path = save_model(init_model(SMALL_DIMS), tmp_path / "model.adcf")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_model(path)
    (tmp_path / "empty.adcf").write_bytes(b"")
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "empty.adcf")
