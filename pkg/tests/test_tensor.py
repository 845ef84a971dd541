"""Tensor core: ops, tape semantics, backward, finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftune.errors import GradientError, ShapeError
from difftune.rng import RngStream
from difftune.tensor import (
    Tape,
    Tensor,
    backward,
    concat,
    finite_diff_check,
    layer_norm,
    matmul,
    mean_all,
    mul,
    narrow,
    register_op,
    reshape,
    sample_gaussian,
    softmax,
    sum_all,
)


def test_tensor_invariant_shape_matches_buffer():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.size == 4
    assert t.data.dtype == np.float64


def test_matmul_identity():
    a = Tensor([[2.0, -1.0], [0.5, 3.0]])
    out = matmul(Tensor(np.eye(2)), a)
    assert np.array_equal(out.data, a.data)


def test_matmul_hand_product():
    # hand multiplication: [[1*5+2*7, 1*6+2*8], [3*5+4*7, 3*6+4*8]]
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_associative_on_well_conditioned():
    rng = RngStream(11)
    a, b, c = (Tensor(rng.normal((8, 8))) for _ in range(3))
    left = matmul(matmul(a, b), c).data
    right = matmul(a, matmul(b, c)).data
    assert np.max(np.abs(left - right)) / np.max(np.abs(left)) < 1e-10


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0]), axis=0)
    assert np.allclose(out.data, [0.5, 0.5], atol=0, rtol=0)


def test_softmax_quarter_three_quarters():
    # e^0 = 1 and e^(ln 3) = 3, so the weights are 1/4 and 3/4
    out = softmax(Tensor([0.0, np.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.floats(-30, 30), min_size=2, max_size=6),
    st.floats(-50, 50),
)
def test_softmax_shift_invariance(values, shift):
    x = Tensor(values)
    shifted = Tensor(np.asarray(values) + shift)
    assert np.allclose(
        softmax(x, axis=0).data, softmax(shifted, axis=0).data, atol=1e-12
    )


def test_softmax_rows_sum_to_one():
    x = Tensor(RngStream(3).normal((5, 7)) * 10)
    y = softmax(x, axis=1).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_invalid_axis():
    with pytest.raises(ShapeError):
        softmax(Tensor([1.0, 2.0]), axis=2)


def test_layer_norm_constant_vector_zeros():
    out = layer_norm(
        Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5
    )
    assert np.allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_point():
    # mean 2, population std 1 -> normalized to [-1, 1] as eps -> 0
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-12)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-6)


def test_layer_norm_zero_gain_gives_bias():
    bias = Tensor([5.0, -2.0, 0.5])
    out = layer_norm(Tensor(RngStream(1).normal((4, 3))), Tensor(np.zeros(3)), bias, 1e-5)
    assert np.allclose(out.data, np.broadcast_to(bias.data, (4, 3)), atol=0)


def test_layer_norm_dimension_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_backward_product_rule():
    a = Tensor(RngStream(2).normal(5), grad_enabled=True)
    b = Tensor(RngStream(3).normal(5))
    with Tape() as tape:
        loss = sum_all(mul(a, b))
    grads = backward(loss, tape)
    assert np.array_equal(grads[a], b.data)


def test_backward_quadratic_matches_finite_differences():
    rng = RngStream(4)
    a = Tensor(rng.normal((6, 6)))

    def f(x):
        y = matmul(a, reshape(x, (6, 1)))
        return sum_all(mul(y, y))

    err, _ = finite_diff_check(f, Tensor(rng.normal(6)), 1e-5)
    assert err < 1e-6


def test_backward_skips_frozen_leaves():
    a = Tensor([1.0, 2.0], grad_enabled=True)
    frozen = Tensor([3.0, 4.0], grad_enabled=False)
    with Tape() as tape:
        loss = sum_all(mul(a, frozen))
    grads = backward(loss, tape)
    assert a in grads
    assert frozen not in grads


def test_backward_rejects_non_scalar_loss():
    a = Tensor([1.0, 2.0], grad_enabled=True)
    with Tape() as tape:
        y = mul(a, a)
    with pytest.raises(GradientError, match="scalar"):
        backward(y, tape)


def test_backward_rejects_detached_loss():
    a = Tensor([1.0], grad_enabled=True)
    with Tape() as tape:
        mul(a, a)
    stray = sum_all(mul(a, a))  # built outside the tape
    with pytest.raises(GradientError, match="detached|tape"):
        backward(stray, tape)


def test_tape_visits_each_record_once():
    a = Tensor([2.0], grad_enabled=True)
    with Tape() as tape:
        b = mul(a, a)   # reused twice below
        loss = sum_all(mul(b, b))
    grads = backward(loss, tape)
    # d/da (a^2)^2 = 4 a^3 = 32
    assert np.allclose(grads[a], [32.0])
    assert len(tape) == 3


def test_finite_diff_square_at_three():
    err, _ = finite_diff_check(lambda x: sum_all(mul(x, x)), Tensor([3.0]), 1e-5)
    assert err < 1e-9  # analytic 6 vs central difference


def test_finite_diff_constant_function_zero_error():
    const = Tensor([7.0])
    err, _ = finite_diff_check(lambda x: sum_all(mul(const, const)), Tensor([1.0, 2.0]))
    assert err == 0.0


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: sum_all(x), Tensor([1.0]), h=0.0)


def test_finite_diff_detects_corrupted_rule():
    def bad_square(x):
        out = Tensor(x.data * x.data)
        # deliberately wrong cotangent: should be 2x * g
        return register_op(out, (x,), lambda g: (3.0 * x.data * g,))

    err, idx = finite_diff_check(
        lambda x: sum_all(bad_square(x)), Tensor([1.0, 4.0]), 1e-5
    )
    assert err > 1e-2
    assert idx == 1  # worst at the larger coordinate


def test_ops_are_deterministic():
    rng = RngStream(6)
    x = Tensor(rng.normal((10, 10)))
    w = Tensor(RngStream(7).normal((10, 10)))
    first = matmul(softmax(x, axis=1), w).data
    second = matmul(softmax(Tensor(x.data.copy()), axis=1), Tensor(w.data.copy())).data
    assert np.array_equal(first, second)


def test_forward_values_stay_finite():
    rng = RngStream(8)
    x = Tensor(rng.normal((4, 6)) * 100)
    y = softmax(x, axis=1)
    z = layer_norm(y, Tensor(np.ones(6)), Tensor(np.zeros(6)), 1e-5)
    assert np.all(np.isfinite(z.data))


def test_narrow_concat_round_trip():
    x = Tensor(RngStream(9).normal((5, 4)))
    parts = [narrow(x, 0, i, 1) for i in range(5)]
    assert np.array_equal(concat(parts, axis=0).data, x.data)


def test_narrow_out_of_range():
    with pytest.raises(ShapeError):
        narrow(Tensor(np.ones((3, 3))), 0, 2, 2)


def test_sample_gaussian_deterministic_per_stream():
    a = sample_gaussian((64,), RngStream(42, 5))
    b = sample_gaussian((64,), RngStream(42, 5))
    assert np.array_equal(a.data, b.data)


def test_sample_gaussian_moments():
    draws = sample_gaussian((1_000_000,), RngStream(123)).data
    assert abs(draws.mean()) < 0.01
    assert abs(draws.var() - 1.0) < 0.01


def test_sample_gaussian_streams_uncorrelated():
    a = sample_gaussian((100_000,), RngStream(123, 1)).data
    b = sample_gaussian((100_000,), RngStream(123, 2)).data
    rho = np.corrcoef(a, b)[0, 1]
    assert abs(rho) < 0.01


def test_mean_all_gradient():
    x = Tensor(RngStream(10).normal((3, 3)), grad_enabled=True)
    with Tape() as tape:
        loss = mean_all(x)
    grads = backward(loss, tape)
    assert np.allclose(grads[x], np.full((3, 3), 1.0 / 9.0))
