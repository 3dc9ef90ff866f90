"""Autodiff layer: gradients against central differences, error taxonomy,
and the no-mutation guarantee."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from tridiff import tensor as T
from tridiff.tensor import (GraphError, NumericFaultError, ShapeError, Tensor,
                            backward, grad_check, no_grad)

from helpers import MiniatureNet, primitive_fd_sweep, sha


def test_fd_sweep_covers_every_primitive():
    total, worst, per_case = primitive_fd_sweep(trials_per_case=2, seed=11)
    names = {c.split("[")[0] for c in per_case}
    assert names == set(T.PRIMITIVES)
    assert worst < 1e-4, f"worst FD relative error {worst:.3e}: {per_case}"
    assert total >= len(T.PRIMITIVES) * 2


def test_registry_has_no_kinked_primitives():
    # The sampling domains are the only exclusions; nothing in the set
    # carries a kink that would need per-point exclusion logic.
    for name, (_, arity, domain) in T.PRIMITIVES.items():
        assert arity in (1, 2)
        assert domain in ("any", "positive", "row", "scalar_second",
                          "matmul", "matrix"), (name, domain)


def test_miniature_end_to_end_loss_gradients():
    errs = MiniatureNet(seed=3).fd_check_all()
    worst = max(errs.values())
    assert worst < 1e-4, f"miniature chain FD errors {errs}"


def test_l2_normalize_three_four_five():
    z = T.l2_normalize(Tensor(np.asarray([[3.0, 4.0]])))
    np.testing.assert_allclose(z.data, [[0.6, 0.8]], rtol=0, atol=1e-12)


def test_l2_normalize_gradient_is_tangent():
    # Any loss of x/|x| has gradient orthogonal to x.
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 6)) + 0.1, requires_grad=True)
    w = T.const(rng.standard_normal((4, 6)), dtype=np.float64)
    g = backward(T.tsum(T.mul(T.l2_normalize(x), w)), [x])[x]
    dots = np.abs((g * x.data).sum(axis=1))
    scale = np.linalg.norm(g, axis=1) * np.linalg.norm(x.data, axis=1)
    assert np.max(dots / scale) < 1e-10


def test_softmax_rows_normalized():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 7)) * 3.0)
    s = T.softmax(x).data
    np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-6)
    assert np.all(s > 0)


def test_logsumexp_shift_stability():
    x = Tensor(np.asarray([[1000.0, 1000.1], [-1000.0, -999.9]]))
    out = T.logsumexp(x).data
    expect0 = 1000.1 + np.log1p(np.exp(-0.1))
    expect1 = -999.9 + np.log1p(np.exp(-0.1))
    np.testing.assert_allclose(out, [expect0, expect1], rtol=1e-12)


def test_layer_norm_moments():
    x = Tensor(np.random.default_rng(1).standard_normal((6, 9)) * 4.0 + 2.0)
    y = T.layer_norm(x).data
    np.testing.assert_allclose(y.mean(axis=-1), np.zeros(6), atol=1e-6)
    np.testing.assert_allclose(y.var(axis=-1), np.ones(6), atol=1e-3)


def test_forward_backward_mutates_nothing():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    y = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    before = (sha(x.data), sha(y.data))
    loss = T.tsum(T.mul(T.softmax(T.matmul(x, T.transpose(y))), T.add(x, y)))
    backward(loss, [x, y])
    assert (sha(x.data), sha(y.data)) == before


def test_shape_error_mismatched_add():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_shape_error_bad_matmul():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_shape_error_mixed_dtypes():
    a = Tensor(np.zeros((2, 2), dtype=np.float32))
    b = Tensor(np.zeros((2, 2), dtype=np.float64))
    with pytest.raises(ShapeError):
        T.add(a, b)


def test_numeric_fault_log_of_negative():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericFaultError):
            T.log(Tensor(np.asarray([-1.0])))


def test_numeric_fault_overflowing_exp():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NumericFaultError):
            T.exp(Tensor(np.asarray([1000.0], dtype=np.float32)))


def test_graph_error_nonscalar_backward():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        backward(T.add(x, x))


def test_no_grad_produces_constants():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad():
        y = T.mul(x, x)
    assert y.parents == () and not y.requires_grad
    loss = T.tsum(T.mul(y, x))  # only the outer mul sees x
    g = backward(loss, [x])[x]
    np.testing.assert_allclose(g, np.ones((2, 2)))


def test_backward_accumulates_reused_operand():
    x = Tensor(np.asarray([2.0]), requires_grad=True)
    g = backward(T.tsum(T.add(x, x)), [x])[x]
    np.testing.assert_allclose(g, [2.0])


def test_backward_zeros_for_unreached_params():
    x = Tensor(np.asarray([1.0]), requires_grad=True)
    other = Tensor(np.zeros((3,)), requires_grad=True)
    g = backward(T.tsum(x), [x, other])
    np.testing.assert_allclose(g[other], np.zeros(3))


def test_scalar_operand_receives_summed_adjoint():
    s = Tensor(np.asarray(1.5), requires_grad=True)
    x = T.const(np.ones((2, 3)), dtype=np.float64)
    g = backward(T.tsum(T.add(x, s)), [s])[s]
    np.testing.assert_allclose(np.asarray(g), 6.0)


def test_grad_check_runs_in_float64():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32))
    err = grad_check(lambda v: T.tsum(T.mul(v, v)), x)
    assert err < 1e-9
