"""Autodiff engine: op semantics, gradient soundness, masking rules."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grad_close, fd_gradient
from ucm.tensor import (
    Tensor,
    embedding_lookup,
    gather_rows,
    gelu,
    layer_norm,
    linear,
    masked_softmax,
    matmul,
    no_grad,
    pad_rows,
    softmax_cross_entropy,
    tsum,
)


def test_backward_elementwise_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = tsum(x * x)
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_loss_leaves_zero_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = tsum(Tensor([4.0]) * Tensor([2.0]))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, -2.0], requires_grad=True)
    tsum(x * x).backward()
    tsum(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, [2.0 + 3.0, -4.0 + 3.0])


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(3, 4)))
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b1 = Tensor(rng.normal(size=5), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    b2 = Tensor(rng.normal(size=2), requires_grad=True)

    def loss_fn():
        return tsum(linear(gelu(linear(x, w1, b1)), w2, b2) * 0.3)

    loss = loss_fn()
    loss.backward()
    for p in (w1, b1, w2, b2):
        assert_grad_close(p.grad, fd_gradient(loss_fn, p))


def test_masked_softmax_single_allowed_entry():
    p = masked_softmax(Tensor([5.0, 9.9]), [True, False])
    np.testing.assert_array_equal(p.data, [1.0, 0.0])


def test_masked_softmax_uniform():
    p = masked_softmax(Tensor([0.0, 0.0, 0.0]), [True, True, True])
    np.testing.assert_allclose(p.data, [1 / 3] * 3)


def test_masked_softmax_matches_scalar_oracle():
    logits = [1.0, 2.0]
    p = masked_softmax(Tensor(logits), [True, True])
    denom = sum(math.exp(v) for v in logits)
    expected = [math.exp(v) / denom for v in logits]
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_masked_softmax_empty_row_errors():
    with pytest.raises(ValueError, match="empty attention row"):
        masked_softmax(Tensor([[1.0, 2.0], [3.0, 4.0]]), [[True, True], [False, False]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.data())
def test_masked_softmax_rows_normalize_and_zero(logits, data):
    allow = data.draw(
        st.lists(st.booleans(), min_size=len(logits), max_size=len(logits)).filter(any)
    )
    p = masked_softmax(Tensor(logits), allow)
    assert abs(p.data.sum() - 1.0) < 1e-12
    for prob, ok in zip(p.data, allow):
        if not ok:
            assert prob == 0.0
        else:
            assert prob > 0.0


def test_masked_softmax_gradient_stays_off_masked_entries():
    x = Tensor([0.3, -1.2, 0.8, 2.0], requires_grad=True)
    allow = [True, False, True, True]
    p = masked_softmax(x, allow)
    tsum(p * Tensor([1.0, 5.0, -2.0, 0.5])).backward()
    assert x.grad[1] == 0.0

    def loss_fn():
        return tsum(masked_softmax(x, allow) * Tensor([1.0, 5.0, -2.0, 0.5]))

    assert_grad_close(x.grad, fd_gradient(loss_fn, x))


def test_layer_norm_constant_vector_is_zero_before_scale_shift():
    x = Tensor([3.0, 3.0, 3.0, 3.0])
    out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros(4))


def test_gelu_zero():
    assert gelu(Tensor([0.0])).data[0] == 0.0


def test_linear_identity():
    x = Tensor([[1.0, -2.5], [0.25, 4.0]])
    out = linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x.data)


def test_linear_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(3,\).*\(2, 4\)"):
        linear(Tensor(np.zeros(3)), Tensor(np.zeros((2, 4))))


def test_batched_matmul_gradients():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)

    def loss_fn():
        return tsum(matmul(a, b))

    loss_fn().backward()
    assert_grad_close(a.grad, fd_gradient(loss_fn, a))
    assert_grad_close(b.grad, fd_gradient(loss_fn, b))


def test_gather_and_pad_rows_roundtrip_gradients():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    picked = gather_rows(x, [2, 0, 2])
    np.testing.assert_array_equal(picked.data, x.data[[2, 0, 2]])

    def loss_fn():
        padded = pad_rows(gather_rows(x, [2, 0, 2]), [0, 1, 2], 5)
        return tsum(padded * padded)

    loss_fn().backward()
    assert_grad_close(x.grad, fd_gradient(loss_fn, x))


def test_embedding_lookup_accumulates_repeated_ids():
    table = Tensor(np.ones((5, 2)), requires_grad=True)
    out = embedding_lookup(table, [1, 1, 3])
    tsum(out).backward()
    np.testing.assert_array_equal(table.grad[1], [2.0, 2.0])
    np.testing.assert_array_equal(table.grad[3], [1.0, 1.0])
    np.testing.assert_array_equal(table.grad[0], [0.0, 0.0])


def test_softmax_cross_entropy_matches_manual_nll():
    logits = Tensor([[0.2, -1.0, 3.0], [1.0, 1.0, 1.0]], requires_grad=True)
    loss = softmax_cross_entropy(logits, [2, 0])
    row0 = np.exp([0.2, -1.0, 3.0])
    manual = (-np.log(row0[2] / row0.sum()) + np.log(3.0)) / 2.0
    assert abs(loss.item() - manual) < 1e-12

    def loss_fn():
        return softmax_cross_entropy(logits, [2, 0])

    loss.backward()
    assert_grad_close(logits.grad, fd_gradient(loss_fn, logits))


def test_ops_are_deterministic():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 8))
    w = rng.normal(size=(8, 8))
    first = layer_norm(gelu(linear(Tensor(x), Tensor(w))), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    second = layer_norm(gelu(linear(Tensor(x), Tensor(w))), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_array_equal(first, second)


def test_no_grad_skips_graph_recording():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = tsum(x * x)
    assert not y.requires_grad and y._backprop is None


def test_values_view_is_row_major():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(t.values, [1.0, 2.0, 3.0, 4.0])
    assert math.prod(t.shape) == len(t.values)
