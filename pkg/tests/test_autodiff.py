import numpy as np
import pytest

import gated_transducer.autodiff as ad
from gated_transducer.autodiff import (
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    backward,
    grad_check,
    no_grad,
)


def scalar(expr):
    return ad.sum_(expr)


def test_add_broadcasts_and_reduces_grad():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    out = scalar(a + b)
    backward(out)
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    # each column of b feeds three rows of the sum
    np.testing.assert_allclose(b.grad, 3.0)


def test_matmul_grads_match_transpose_formula():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    backward(scalar(a @ b))
    g = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, g @ b.values.T)
    np.testing.assert_allclose(b.grad, a.values.T @ g)


def test_matmul_rejects_mismatched_inner_dim():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 2)))
    with pytest.raises(DimensionError):
        a @ b


def test_grad_accumulates_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(scalar(x * x))
    np.testing.assert_allclose(x.grad, [4.0])


def test_softmax_rows_normalized_and_masked():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(4, 6)))
    p = ad.softmax(x, axis=1)
    np.testing.assert_allclose(p.values.sum(axis=1), 1.0, atol=1e-12)

    mask = np.ones((4, 6), dtype=bool)
    mask[:, 3:] = False
    pm = ad.softmax(x, axis=1, mask=mask)
    assert np.all(pm.values[:, 3:] == 0.0)
    np.testing.assert_allclose(pm.values.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_fully_masked_row_raises():
    x = Tensor(np.zeros((2, 3)))
    mask = np.zeros((2, 3), dtype=bool)
    with pytest.raises(ContractError):
        ad.softmax(x, axis=1, mask=mask)


def test_log_softmax_agrees_with_softmax():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 5)) * 4)
    np.testing.assert_allclose(
        np.exp(ad.log_softmax(x, axis=1).values),
        ad.softmax(x, axis=1).values,
        atol=1e-12,
    )


def test_logsumexp_is_shift_invariant():
    x = np.array([[1.0, 2.0, 3.0]])
    a = ad.logsumexp(Tensor(x), axis=1).values
    b = ad.logsumexp(Tensor(x + 500.0), axis=1).values - 500.0
    np.testing.assert_allclose(a, b)
    assert np.isfinite(b).all()


def test_layer_norm_output_standardized():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(5, 8)))
    y = ad.layer_norm(x).values
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_embedding_grad_is_scatter_add():
    table = Tensor(np.zeros((4, 3)), requires_grad=True)
    out = ad.embedding(table, [1, 1, 3])
    backward(scalar(out))
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_allclose(table.grad, expected)


def test_embedding_index_out_of_range():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(ContractError):
        ad.embedding(table, [0, 4])


def test_concat_slice_roundtrip_grads():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    joined = ad.concat([a, b], axis=1)
    left = ad.slice_axis(joined, 0, 3, axis=1)
    backward(scalar(left))
    np.testing.assert_allclose(a.grad, 1.0)
    np.testing.assert_allclose(b.grad, 0.0)


def test_cross_entropy_matches_manual():
    logits = Tensor(np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]]))
    targets = [1, 2]
    loss = ad.cross_entropy_with_logits(logits, targets).item()
    lp = ad.log_softmax(logits, axis=1).values
    np.testing.assert_allclose(loss, -(lp[0, 1] + lp[1, 2]) / 2)


def test_no_grad_blocks_graph_construction():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = x @ x
    assert not y.requires_grad
    with pytest.raises(ContractError):
        backward(scalar(y))


def test_backward_requires_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        backward(x + x)


def test_non_finite_result_raises():
    x = Tensor(np.array([[1e308, 1e308]]))
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        x + x


def test_grad_check_on_composite():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 4)))

    def f(t):
        h = ad.tanh(t @ w)
        return ad.sum_(ad.layer_norm(h) * ad.sigmoid(t))

    assert grad_check(f, x) < 1e-6


def test_pairwise_sum_rows_and_grads():
    a = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    b = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    out = ad.pairwise_sum(a, b)
    # row t*B+u is a[t] + b[u]
    assert out.shape == (12, 2)
    np.testing.assert_allclose(out.values[1 * 4 + 2], a.values[1] + b.values[2])
    backward(scalar(out))
    np.testing.assert_allclose(a.grad, 4.0)
    np.testing.assert_allclose(b.grad, 3.0)


def test_row_scale_weights_columns():
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    w = Tensor(np.array([[1.0], [2.0], [3.0]]), requires_grad=True)
    out = ad.row_scale(a, w)
    np.testing.assert_allclose(out.values, [[1, 1], [2, 2], [3, 3]])
    backward(scalar(out))
    np.testing.assert_allclose(w.grad, [[2.0], [2.0], [2.0]])
