# -*- coding: utf-8 -*-
"""
Tests for the tensor core: ops, gradients, Adam and checkpoints
"""

import struct

import numpy as np
import pytest

import numerics as nx
from conftest import assert_grad_matches
from errors import ArgumentError, ConfigError, DataError, ShapeError, TrainingAborted


def test_matmul_values():
    """Identity and hand-multiplied products"""
    identity = nx.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
    np.testing.assert_array_equal(identity.data, [[3, 4], [5, 6]])
    assert nx.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_is_ones_times_b_transpose(rng):
    a = nx.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = nx.Tensor(rng.standard_normal((4, 2)))
    nx.reduce_sum(nx.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)


def test_conv1d_hand_example():
    kernel = np.ones((3, 1, 1))
    out = nx.conv1d(np.array([[1.0], [2.0], [3.0]]), kernel, np.zeros(1))
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 6.0, 5.0])


def test_conv1d_width_one_identity(rng):
    x = rng.standard_normal((5, 4))
    out = nx.conv1d(x, np.eye(4)[None], np.zeros(4))
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_rejects_even_width():
    with pytest.raises(ConfigError):
        nx.conv1d(np.ones((4, 2)), np.ones((2, 2, 2)), np.zeros(2))


def test_conv1d_rejects_channel_mismatch():
    with pytest.raises(ShapeError):
        nx.conv1d(np.ones((4, 3)), np.ones((3, 2, 2)), np.zeros(2))


def test_conv1d_gradients(rng):
    x = nx.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    kernel = nx.Tensor(rng.standard_normal((3, 3, 2)), requires_grad=True)
    bias = nx.Tensor(rng.standard_normal(2), requires_grad=True)
    weights = rng.standard_normal((6, 2))

    def loss():
        return nx.reduce_sum(nx.mul(nx.conv1d(x, kernel, bias), weights))

    assert_grad_matches(loss, kernel, [(0, 0, 0), (1, 2, 1), (2, 1, 0)])
    assert_grad_matches(loss, x, [(0, 0), (3, 1), (5, 2)])
    assert_grad_matches(loss, bias, [(0,), (1,)])


def test_softmax_values():
    np.testing.assert_allclose(nx.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3)
    np.testing.assert_allclose(nx.softmax([2.0, 0.0, 0.0]).data, [0.78699, 0.10650, 0.10650], atol=1e-4)
    np.testing.assert_allclose(nx.softmax([1000.0, 0.0]).data, [1.0, 0.0])


def test_softmax_rows_sum_to_one(rng):
    values = nx.softmax(rng.standard_normal((7, 5)) * 30, axis=1).data
    np.testing.assert_allclose(values.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(values > 0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.standard_normal(6)
    np.testing.assert_allclose(nx.log_softmax(x).data, np.log(nx.softmax(x).data), atol=1e-12)


@pytest.mark.parametrize("op", [nx.sigmoid, nx.relu, nx.square, nx.absolute])
def test_unary_gradients(rng, op):
    x = nx.Tensor(rng.standard_normal((4, 4)) + 0.05, requires_grad=True)
    weights = rng.standard_normal((4, 4))
    assert_grad_matches(lambda: nx.reduce_sum(nx.mul(op(x), weights)), x, [(0, 0), (1, 3), (3, 2)])


def test_softmax_and_max_gradients(rng):
    x = nx.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    weights = rng.standard_normal((5, 4))
    assert_grad_matches(lambda: nx.reduce_sum(nx.mul(nx.softmax(x, axis=1), weights)), x, [(0, 1), (4, 3)])
    assert_grad_matches(lambda: nx.reduce_sum(nx.max_over_axis(x, axis=1)), x, [(0, 0), (2, 2), (4, 1)])


def test_gather_and_div_gradients(rng):
    x = nx.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    index = (np.array([[0], [2], [2]]), np.array([[0, 1]]))
    assert_grad_matches(lambda: nx.reduce_sum(nx.square(nx.gather(x, index))), x, [(0, 0), (2, 1), (3, 2)])
    denominator = nx.Tensor(rng.uniform(1, 2, 3), requires_grad=True)
    assert_grad_matches(lambda: nx.reduce_sum(nx.div(x, denominator)), denominator, [(0,), (2,)])


def test_sigmoid_extremes():
    assert nx.sigmoid(0.0).item() == 0.5
    values = nx.sigmoid([-800.0, 800.0]).data
    assert np.all(np.isfinite(values))
    np.testing.assert_allclose(values, [0.0, 1.0])


def test_topk_indices():
    np.testing.assert_array_equal(nx.topk_indices([0.5, 0.1, 0.9, 0.3], 2), [2, 0])
    np.testing.assert_array_equal(nx.topk_indices([1.0, 1.0, 1.0], 2), [0, 1])
    with pytest.raises(ArgumentError):
        nx.topk_indices([1.0, 2.0], 3)


def test_stop_gradient_blocks_flow():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    y = nx.Tensor([3.0, 4.0], requires_grad=True)
    nx.reduce_sum(nx.mul(nx.stop_gradient(x), y)).backward()
    assert x.grad is None
    np.testing.assert_array_equal(y.grad, [1.0, 2.0])


def test_l1_norm_and_mse():
    assert nx.l1_norm([-1.0, 2.0, -3.0]).item() == 6.0
    assert nx.mse([1.0, 2.0], [1.0, 4.0]).item() == 2.0


def test_backward_rejects_non_scalar():
    x = nx.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        nx.mul(x, 2.0).backward()


def test_backward_detects_non_finite_gradient():
    x = nx.Tensor([0.0], requires_grad=True)
    with pytest.raises(TrainingAborted):
        nx.reduce_sum(nx.div(1.0, x)).backward()


def test_dropout_identity_without_generator(rng):
    x = nx.Tensor(rng.standard_normal(10))
    assert nx.dropout(x, 0.5, None) is x
    with pytest.raises(ConfigError):
        nx.dropout(x, 1.0, rng)


def test_dropout_scales_survivors(rng):
    out = nx.dropout(nx.Tensor(np.ones(1000)), 0.5, rng).data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_adam_zero_gradient_leaves_params():
    param = nx.Tensor([1.0, -2.0], requires_grad=True)
    nx.adam_step({"w": param}, {"w": np.zeros(2)}, nx.AdamState(learning_rate=0.1))
    np.testing.assert_array_equal(param.data, [1.0, -2.0])


def test_adam_first_step_is_learning_rate():
    param = nx.Tensor([0.0], requires_grad=True)
    state = nx.adam_step({"w": param}, {"w": np.array([1.0])}, nx.AdamState(learning_rate=0.1))
    assert state.step_count == 1
    assert param.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_is_deterministic(rng):
    grads = [rng.standard_normal(3) for _ in range(5)]

    def run():
        param = nx.Tensor(np.ones(3), requires_grad=True)
        state = nx.AdamState(learning_rate=0.01)
        for grad in grads:
            nx.adam_step({"w": param}, {"w": grad}, state)
        return param.data

    assert run().tobytes() == run().tobytes()


def test_adam_aborts_on_nan():
    param = nx.Tensor([1.0], requires_grad=True)
    with pytest.raises(TrainingAborted):
        nx.adam_step({"w": param}, {"w": np.array([np.nan])}, nx.AdamState())


def test_glorot_bounds(rng):
    weight = nx.conv_weight(3, 4, 5, rng)
    limit = np.sqrt(6.0 / (12 + 15))
    assert weight.shape == (3, 4, 5)
    assert np.all(np.abs(weight.data) <= limit)


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((3, 2, 4)), "a.b": np.zeros(4), "scalar": np.array(2.5)}
    path = nx.save_checkpoint(tmp_path / "model.mcwc", params)
    loaded = nx.load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, value in params.items():
        np.testing.assert_array_equal(loaded[name], value)


def test_checkpoint_layout(tmp_path):
    path = nx.save_checkpoint(tmp_path / "one.mcwc", {"w": np.array([1.0, 2.0])})
    payload = path.read_bytes()
    assert payload[:4] == b"MCWC"
    assert struct.unpack_from("<II", payload, 4) == (1, 1)
    assert struct.unpack_from("<H", payload, 12) == (1,)
    assert payload[14:15] == b"w"
    assert struct.unpack_from("<II", payload, 15) == (1, 2)
    assert struct.unpack_from("<2d", payload, 23) == (1.0, 2.0)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.mcwc"
    bad.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(DataError):
        nx.load_checkpoint(bad)

    good = nx.save_checkpoint(tmp_path / "good.mcwc", {"w": np.ones(4)})
    truncated = tmp_path / "truncated.mcwc"
    truncated.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(DataError):
        nx.load_checkpoint(truncated)
