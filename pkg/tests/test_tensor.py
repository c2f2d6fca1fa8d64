"""Autodiff engine tests.

Oracle: an independent central-difference gradient (float64, forward-only)
written here, against which both backward() and grad_check() are judged.
"""

import math

import numpy as np
import pytest

import flowgen.tensor as T
from flowgen import ComputeGraph, Tensor, backward, grad_check, use_graph
from flowgen.util import ContractError, NonFiniteError


def numeric_grad(f, x0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences on float64 copies; independent of grad_check."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            fp = f(Tensor(bumped.reshape(x0.shape), dtype=np.float64)).item()
            bumped[i] = flat[i] - h
            fm = f(Tensor(bumped.reshape(x0.shape), dtype=np.float64)).item()
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grad(f, x0: np.ndarray) -> np.ndarray:
    x = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True, dtype=np.float64)
    with use_graph(ComputeGraph()):
        backward(f(x))
    return np.zeros_like(x.data) if x.grad is None else x.grad.copy()


def assert_grads_close(f, x0, tol=1e-6):
    num = numeric_grad(f, x0)
    ana = analytic_grad(f, x0)
    denom = np.abs(num) + np.abs(ana) + 1e-8
    rel = np.abs(num - ana) / denom
    assert rel.max() < tol, f"max rel err {rel.max():.3g}"


# ---- specced examples ----

def test_matmul_of_ones_sums_inner_dim():
    a = Tensor(np.ones((2, 3), dtype=np.float32))
    b = Tensor(np.ones((3, 4), dtype=np.float32))
    out = T.matmul(a, b)
    assert out.shape == (2, 4)
    np.testing.assert_array_equal(out.data, np.full((2, 4), 3.0, dtype=np.float32))


def test_softmax_of_zeros_is_uniform():
    out = T.softmax(Tensor(np.zeros(3, dtype=np.float32)))
    np.testing.assert_allclose(out.data, np.full(3, 1.0 / 3.0), atol=1e-7)


def test_layernorm_standardizes():
    out = T.layernorm(Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32)))
    assert abs(out.data.mean()) < 1e-6
    assert abs(out.data.var() - 1.0) < 1e-3  # biased var with eps in denominator


def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
    with use_graph(ComputeGraph()):
        backward(T.sum_(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-6)


def test_matmul_adjoint_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(2, 3)).astype(np.float32), requires_grad=True)
    bdata = rng.normal(size=(3, 4)).astype(np.float32)
    with use_graph(ComputeGraph()):
        backward(T.sum_(T.matmul(a, Tensor(bdata))))
    np.testing.assert_allclose(a.grad, np.ones((2, 4), dtype=np.float32) @ bdata.T,
                               rtol=1e-5)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    w1 = rng.normal(size=(5, 8)).astype(np.float32) * 0.5
    w2 = rng.normal(size=(8, 8)).astype(np.float32) * 0.5
    w3 = rng.normal(size=(8, 1)).astype(np.float32) * 0.5

    def f(x):
        h1 = T.gelu(T.matmul(x, Tensor(w1, dtype=x.dtype)))
        h2 = T.gelu(T.matmul(h1, Tensor(w2, dtype=x.dtype)))
        return T.sum_(T.matmul(h2, Tensor(w3, dtype=x.dtype)))

    x0 = rng.normal(size=(2, 5))
    num = numeric_grad(f, x0, h=1e-3)
    ana = analytic_grad(f, x0)
    rel = np.abs(num - ana) / (np.abs(num) + np.abs(ana) + 1e-8)
    assert rel.max() < 1e-3


def test_grad_check_sum_of_squares_tiny_error():
    x = Tensor(np.array([0.5, -1.5, 2.0], dtype=np.float32))
    assert grad_check(lambda t: T.sum_(T.mul(t, t)), x) < 1e-6


def test_grad_check_softmax_cross_entropy():
    rng = np.random.default_rng(11)
    logits = Tensor(rng.normal(size=(4, 7)).astype(np.float32))
    onehot = np.eye(7, dtype=np.float32)[rng.integers(0, 7, size=4)]

    def f(z):
        logp = T.log_softmax(z)
        return T.scale(T.sum_(T.mul(logp, Tensor(onehot, dtype=z.dtype))), -1.0 / 4.0)

    assert grad_check(f, logits) < 1e-3


def test_grad_check_rejects_out_of_range_h():
    x = Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(ContractError):
        grad_check(lambda t: T.sum_(t), x, h=1e-6)
    with pytest.raises(ContractError):
        grad_check(lambda t: T.sum_(t), x, h=0.5)


def test_grad_check_reports_nonfinite_probe_coordinate():
    # float64 exp overflows just above 709.7827; the base point stays finite
    x = Tensor(np.array([709.7825, 0.0]), dtype=np.float64)
    with pytest.raises(NonFiniteError, match="coordinate 0"):
        grad_check(lambda t: T.sum_(T.exp(t)), x, h=1e-3)


# ---- per-op adjoints vs the independent oracle ----

def test_add_sub_mul_adjoints():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(3, 4))
    assert_grads_close(lambda x: T.sum_(T.add(x, Tensor(b, dtype=x.dtype))),
                       rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(lambda x: T.sum_(T.sub(Tensor(b, dtype=x.dtype), x)),
                       rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(lambda x: T.sum_(T.mul(x, x)), rng.normal(size=(3, 4)),
                       tol=1e-5)


def test_leading_broadcast_adjoints():
    rng = np.random.default_rng(2)
    big = rng.normal(size=(2, 3, 4))
    assert_grads_close(
        lambda x: T.sum_(T.mul(Tensor(big, dtype=x.dtype), T.add(Tensor(big, dtype=x.dtype), x))),
        rng.normal(size=(4,)), tol=1e-5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(x, Tensor(big, dtype=x.dtype))),
        rng.normal(size=(3, 4)), tol=1e-5)


def test_trailing_broadcast_rejected_with_both_shapes():
    a = Tensor(np.ones((3, 4), dtype=np.float32))
    b = Tensor(np.ones((3, 1), dtype=np.float32))
    with pytest.raises(ContractError, match=r"\(3, 4\).*\(3, 1\)"):
        T.add(a, b)


def test_matmul_inner_dim_mismatch_reports_shapes():
    a = Tensor(np.ones((2, 3), dtype=np.float32))
    b = Tensor(np.ones((4, 2), dtype=np.float32))
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(a, b)


def test_batched_matmul_adjoint():
    rng = np.random.default_rng(4)
    b = rng.normal(size=(2, 4, 3))
    assert_grads_close(
        lambda x: T.sum_(T.matmul(x, Tensor(b, dtype=x.dtype))),
        rng.normal(size=(2, 3, 4)), tol=1e-5)


def test_reshape_permute_concat_slice_adjoints():
    rng = np.random.default_rng(5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.reshape(x, (6, 2)), T.reshape(x, (6, 2)))),
        rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.permute(x, (1, 0)), T.permute(x, (1, 0)))),
        rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.concat([x, x], axis=0), T.concat([x, x], axis=0))),
        rng.normal(size=(2, 3)), tol=1e-5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.slice_(x, (slice(None), slice(1, 3))),
                               T.slice_(x, (slice(None), slice(0, 2))))),
        rng.normal(size=(3, 4)), tol=1e-5)


def test_reductions_softmax_layernorm_gelu_adjoints():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 4))
    assert_grads_close(lambda x: T.sum_(T.mul(T.mean(x, axis=0), T.mean(x, axis=0))),
                       rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.softmax(x), Tensor(w, dtype=x.dtype))),
        rng.normal(size=(3, 4)), tol=1e-4)
    assert_grads_close(
        lambda x: T.sum_(T.mul(T.layernorm(x), Tensor(w, dtype=x.dtype))),
        rng.normal(size=(3, 4)), tol=1e-4)
    assert_grads_close(lambda x: T.sum_(T.gelu(x)), rng.normal(size=(3, 4)), tol=1e-4)
    assert_grads_close(lambda x: T.sum_(T.exp(T.scale(x, 0.3))),
                       rng.normal(size=(3, 4)), tol=1e-5)
    assert_grads_close(lambda x: T.sum_(T.log(T.add(T.mul(x, x), Tensor(np.ones((3, 4)), dtype=x.dtype)))),
                       rng.normal(size=(3, 4)), tol=1e-5)


def test_gather_accumulates_repeated_indices():
    table = Tensor(np.arange(8, dtype=np.float32).reshape(4, 2), requires_grad=True)
    ids = np.array([1, 1, 3], dtype=np.int64)
    with use_graph(ComputeGraph()):
        backward(T.sum_(T.gather_rows(table, ids)))
    expected = np.zeros((4, 2), dtype=np.float32)
    expected[1] = 2.0
    expected[3] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_tile_rows_and_tile_leading_adjoints_sum():
    a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    with use_graph(ComputeGraph()):
        out = T.tile_rows(a, 4)
        assert out.shape == (2, 4, 3)
        backward(T.sum_(out))
    np.testing.assert_array_equal(a.grad, np.full((2, 3), 4.0, dtype=np.float32))

    b = Tensor(np.arange(3, dtype=np.float32), requires_grad=True)
    with use_graph(ComputeGraph()):
        out = T.tile_leading(b, 5)
        assert out.shape == (5, 3)
        backward(T.sum_(T.mul(out, out)))
    np.testing.assert_allclose(b.grad, 5 * 2 * b.data, rtol=1e-6)


def test_sinusoidal_embedding_shape_and_range():
    emb = T.sinusoidal_embedding(np.array([0.0, 0.5, 1.0]), 16).data
    assert emb.shape == (3, 16)
    assert np.all(np.abs(emb) <= 1.0 + 1e-6)
    # distinct timesteps map to distinct codes
    assert not np.allclose(emb[0], emb[2])
    with pytest.raises(ContractError):
        T.sinusoidal_embedding(0.5, 7)


# ---- invariants ----

def test_softmax_rows_sum_to_one_and_layernorm_row_mean_small():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(6, 11)).astype(np.float32) * 3)
    s = T.softmax(x)
    np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(6), atol=1e-6)
    ln = T.layernorm(x)
    assert np.abs(ln.data.mean(axis=-1)).max() < 1e-5


def test_softmax_bias_minus_inf_gives_exact_zeros():
    x = Tensor(np.zeros((2, 4), dtype=np.float32), requires_grad=True)
    bias = np.array([[0, 0, -np.inf, -np.inf],
                     [0, -np.inf, -np.inf, -np.inf]], dtype=np.float32)
    with use_graph(ComputeGraph()):
        s = T.softmax(x, bias=bias)
        np.testing.assert_array_equal(s.data[0, 2:], [0.0, 0.0])
        np.testing.assert_allclose(s.data[0, :2], [0.5, 0.5], atol=1e-7)
        np.testing.assert_allclose(s.data[1, 0], 1.0, atol=1e-7)
        backward(T.sum_(T.mul(s, s)))
    assert np.all(np.isfinite(x.grad))


def test_softmax_bias_rejects_nan_and_plus_inf():
    x = Tensor(np.zeros((1, 3), dtype=np.float32))
    with pytest.raises((ContractError, NonFiniteError)):
        T.softmax(x, bias=np.array([[0.0, np.nan, 0.0]], dtype=np.float32))
    with pytest.raises((ContractError, NonFiniteError)):
        T.softmax(x, bias=np.array([[0.0, np.inf, 0.0]], dtype=np.float32))


def test_branch_gradients_accumulate():
    def two_branch(x):
        return T.add(T.sum_(T.mul(x, x)), T.sum_(T.scale(x, 3.0)))

    x0 = np.array([1.0, -2.0, 0.5])
    ana = analytic_grad(two_branch, x0)
    only_sq = analytic_grad(lambda x: T.sum_(T.mul(x, x)), x0)
    only_lin = analytic_grad(lambda x: T.sum_(T.scale(x, 3.0)), x0)
    np.testing.assert_allclose(ana, only_sq + only_lin, rtol=1e-7)


def test_backward_is_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(4, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 3)).astype(np.float32), requires_grad=True)
        with use_graph(ComputeGraph()):
            y = T.gelu(T.matmul(x, w))
            backward(T.sum_(T.mul(y, y)))
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_graph_records_in_insertion_order_and_clears():
    g = ComputeGraph()
    with use_graph(g):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        y = T.mul(x, x)
        z = T.sum_(y)
        ops = [n.op for n in g.nodes]
        assert ops == ["mul", "sum"]
        assert g.nodes[1].inputs[0] is y
        backward(z)
    assert len(g) == 0


def test_backward_rejects_non_scalar_and_empty_graph():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with use_graph(ComputeGraph()):
        y = T.mul(x, x)
        with pytest.raises(ContractError, match="scalar"):
            backward(y)
    with pytest.raises(ContractError, match="empty"):
        backward(Tensor(np.float32(1.0)), ComputeGraph())


def test_nonfinite_construction_and_op_output_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan], dtype=np.float32))
    big = Tensor(np.full(4, 3e38, dtype=np.float32))
    with pytest.raises(NonFiniteError):
        T.add(big, big)  # overflows float32 to inf
    with pytest.raises(NonFiniteError):
        T.log(Tensor(np.array([0.0], dtype=np.float32)))


def test_tensor_invariants_shape_data_grad():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    assert x.size == 6 and x.shape == (2, 3)
    assert x.dtype == np.float32
    assert x.grad is None
    with use_graph(ComputeGraph()):
        backward(T.sum_(T.mul(x, x)))
    assert x.grad.shape == x.data.shape


def test_no_grad_suppresses_recording():
    g = ComputeGraph()
    with use_graph(g), T.no_grad():
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        T.sum_(T.mul(x, x))
    assert len(g) == 0
