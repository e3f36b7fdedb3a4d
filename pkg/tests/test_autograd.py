import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import tensor_core as tc
from autograd import (
    BACKWARD_RULES, EAGER, Tape, backward, corrupted_rule, forward_traced, grad_check, op_suite,
    relative_error, tiny_pipeline_case,
)
from errors import DimensionError, UsageError

SEEDS = range(5)
DIFFERENTIABLE_OPS = {
    "conv2d", "transpose_conv2d", "avg_pool2d", "max_pool2d", "relu", "sigmoid",
    "batch_norm[train]", "batch_norm[infer]", "l1_loss",
}


def test_suite_covers_every_differentiable_op():
    assert {label for label, _, _ in op_suite(0)} == DIFFERENTIABLE_OPS


@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_passes_in_single_precision(seed):
    for label, builder, inputs in op_suite(seed):
        report = grad_check(builder, inputs, epsilon=1e-2, seed=seed)
        assert report.passed, f"{label}\n{report.format()}"
        assert report.tolerance == 1e-2


@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_passes_in_shadow_mode(seed):
    for label, builder, inputs in op_suite(seed):
        report = grad_check(builder, inputs, epsilon=1e-2, shadow=True, seed=seed)
        assert report.passed, f"{label}\n{report.format()}"
        assert report.tolerance == 1e-4


def test_conv_pool_sigmoid_pipeline_passes():
    builder, inputs = tiny_pipeline_case(0)
    report = grad_check(builder, inputs, epsilon=1e-2)
    assert report.passed, report.format()
    assert max(p.max_rel_error for p in report.params.values()) < 1e-2


def test_corrupted_rule_is_caught_and_restored():
    builder, inputs = tiny_pipeline_case(1)
    original = BACKWARD_RULES["conv2d"]
    with corrupted_rule("conv2d", 1.5):
        report = grad_check(builder, inputs)
    assert not report.passed
    assert report.worst(1)[0].max_rel_error > 0.1
    assert BACKWARD_RULES["conv2d"] is original
    assert grad_check(builder, inputs).passed


def test_corrupted_rule_rejects_unknown_op():
    with pytest.raises(UsageError):
        with corrupted_rule("softmax"):
            pass


def test_grad_check_rejects_non_positive_epsilon():
    builder, inputs = tiny_pipeline_case(0)
    with pytest.raises(UsageError, match="epsilon"):
        grad_check(builder, inputs, epsilon=0.0)


def test_grad_check_needs_scalar_output(rng):
    x = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
    with pytest.raises(UsageError, match="scalar"):
        grad_check(lambda ops, p: ops.relu(p["x"]), {"x": x})


def test_frozen_params_are_reported_but_do_not_fail():
    builder, inputs = tiny_pipeline_case(2)
    with corrupted_rule("conv2d", 3.0):
        report = grad_check(builder, inputs, params=["conv.weight"], frozen=["conv.weight"])
    assert report.params["conv.weight"].frozen
    assert not report.params["conv.weight"].passed
    assert report.passed


def test_max_entries_limits_checked_entries():
    builder, inputs = tiny_pipeline_case(3)
    report = grad_check(builder, inputs, params=["conv.weight"], max_entries=7)
    assert report.params["conv.weight"].entries_checked == 7


def test_traced_forward_matches_eager(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    kernel = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    bias = rng.standard_normal(4).astype(np.float32)

    def builder(ops, p):
        return ops.sigmoid(ops.avg_pool2d(ops.relu(ops.conv2d(p["x"], p["kernel"], p["bias"]))))

    value, tape = forward_traced(builder, {"x": x, "kernel": kernel, "bias": bias})
    assert_array_equal(value, builder(EAGER, {"x": x, "kernel": kernel, "bias": bias}))
    assert tape.output is not None
    assert [node.op for node in tape.nodes[3:]] == ["conv2d", "relu", "avg_pool2d", "sigmoid"]


def test_reused_leaf_accumulates_gradients(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    _, tape = forward_traced(lambda ops, p: ops.sum(ops.mul(p["x"], p["x"])), {"x": x})
    assert_allclose(backward(tape, 1.0)["x"], 2.0 * x)


def test_unused_leaf_gets_zero_gradient(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    _, tape = forward_traced(lambda ops, p: ops.sum(p["x"]), {"x": x, "unused": np.ones(3)})
    grads = backward(tape, 1.0)
    assert_array_equal(grads["unused"], np.zeros(3))
    assert_array_equal(grads["x"], np.ones_like(x))


def test_backward_seed_must_match_output_shape(rng):
    x = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
    _, tape = forward_traced(lambda ops, p: ops.relu(p["x"]), {"x": x})
    with pytest.raises(DimensionError):
        backward(tape, np.ones((1, 1, 3, 3)))
    assert backward(tape, 1.0)["x"].shape == x.shape


def test_backward_without_output_is_a_usage_error():
    with pytest.raises(UsageError):
        backward(Tape(), 1.0)


def test_l1_gradient_at_zero_residual_is_zero():
    p = np.array([0.5, 0.2], np.float32).reshape(1, 1, 1, 2)
    t = np.array([0.5, 0.0], np.float32).reshape(1, 1, 1, 2)
    _, tape = forward_traced(lambda ops, leaves: ops.l1_loss(leaves["p"], t), {"p": p})
    assert_allclose(backward(tape, 1.0)["p"].reshape(-1), [0.0, 0.5])


def test_max_pool_gradient_goes_to_first_maximum():
    x = np.array([[2.0, 2.0], [1.0, 0.0]]).reshape(1, 1, 2, 2)
    _, tape = forward_traced(lambda ops, p: ops.sum(ops.max_pool2d(p["x"])), {"x": x})
    assert_array_equal(backward(tape, 1.0)["x"].reshape(-1), [1.0, 0.0, 0.0, 0.0])


def test_batch_norm_running_stats_pass_through_tape(rng):
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    gamma, beta = np.ones(3, np.float32), np.zeros(3, np.float32)
    mean, var = np.zeros(3, np.float32), np.ones(3, np.float32)
    tape = Tape()
    out, new_mean, new_var = tape.batch_norm(tape.leaf("x", x), gamma, beta, mean, var, "train")
    expected = tc.batch_norm(x, gamma, beta, mean, var, "train")
    assert_array_equal(out.value, expected[0])
    assert_array_equal(new_mean, expected[1])
    assert_array_equal(new_var, expected[2])


def test_relative_error_is_taken_per_entry():
    assert relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_error([2.0, 1.0], [1.0, 1.0]) == pytest.approx(0.5)
    assert relative_error([0.0], [0.0]) == 0.0
    # a wrong small entry is not hidden by a large correct one
    assert relative_error([20.0, 0.04], [20.0, 0.02]) == pytest.approx(0.5)
    assert relative_error([20.0, 0.04], [20.0, 0.02], floor=1e-3) == pytest.approx(0.5)


def test_relative_error_floor_bounds_tiny_entries():
    assert relative_error([1e-9], [2e-9]) == pytest.approx(0.1)
    assert relative_error([1e-9], [2e-9], floor=1e-3) == pytest.approx(1e-6)


def _conv_sigmoid(rng):
    kernel = rng.standard_normal((2, 3, 3, 3))
    bias = rng.standard_normal(2)

    def builder(ops, leaves):
        return ops.sigmoid(ops.conv2d(leaves["x"], leaves["kernel"], bias))

    return builder, {"x": rng.standard_normal((2, 3, 5, 4)), "kernel": kernel}


def test_backward_is_linear_in_the_seed(rng):
    builder, inputs = _conv_sigmoid(rng)
    out, tape = forward_traced(builder, inputs)
    first = rng.standard_normal(out.shape)
    second = rng.standard_normal(out.shape)
    a, b = 0.7, -1.3
    combined = backward(tape, a * first + b * second)
    g1, g2 = backward(tape, first), backward(tape, second)
    for name in inputs:
        assert_allclose(combined[name], a * g1[name] + b * g2[name], rtol=1e-10, atol=1e-12)


def test_repeated_backward_over_one_tape_is_identical(rng):
    builder, inputs = _conv_sigmoid(rng)
    out, tape = forward_traced(builder, inputs)
    seed = rng.standard_normal(out.shape)
    first, second = backward(tape, seed), backward(tape, seed)
    for name in inputs:
        assert_array_equal(first[name], second[name])


def test_max_pool_routes_each_window_seed_to_one_input(rng):
    for _ in range(10):
        n, c, h, w = (int(v) for v in rng.integers(1, 4, size=4))
        x = rng.permutation(n * c * 4 * h * w).reshape(n, c, 2 * h, 2 * w).astype(np.float64)
        out, tape = forward_traced(lambda ops, p: ops.max_pool2d(p["x"]), {"x": x})
        seed = rng.uniform(0.5, 2.0, size=out.shape)
        grad = backward(tape, seed)["x"]
        assert grad.sum() == pytest.approx(seed.sum(), rel=1e-12)
        windows = grad.reshape(n, c, h, 2, w, 2)
        assert_array_equal((windows != 0).sum(axis=(3, 5)), 1)
        assert_allclose(windows.sum(axis=(3, 5)), seed, rtol=1e-12)
        winners = x.reshape(n, c, h, 2, w, 2).max(axis=(3, 5))
        assert_array_equal(np.where(grad != 0, x, -1).reshape(n, c, h, 2, w, 2).max(axis=(3, 5)), winners)
