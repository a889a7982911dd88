"""Autodiff core: graph mechanics, arithmetic gradients, validation."""

import numpy as np
import pytest

from gkw.errors import NumericError
from gkw.tensor import Tensor, parameter


def test_square_gradient():
    p = parameter([3.0], dtype=np.float64)
    loss = p ** 2
    loss.backward()
    assert np.allclose(p.grad, [6.0])


def test_add_mul_chain():
    a = parameter([2.0], dtype=np.float64)
    b = parameter([5.0], dtype=np.float64)
    loss = (a * b + a) * 3.0
    loss.backward()
    # d/da 3(ab + a) = 3(b + 1), d/db = 3a
    assert np.allclose(a.grad, [18.0])
    assert np.allclose(b.grad, [6.0])


def test_reuse_accumulates():
    p = parameter([4.0], dtype=np.float64)
    loss = p * p + p * 2.0
    loss.backward()
    assert np.allclose(p.grad, [10.0])


def test_sub_neg():
    a = parameter([7.0], dtype=np.float64)
    b = parameter([3.0], dtype=np.float64)
    loss = (a - b).sum()
    loss.backward()
    assert np.allclose(a.grad, [1.0])
    assert np.allclose(b.grad, [-1.0])


def test_broadcast_gradient_shapes():
    a = parameter(np.ones((3, 4)), dtype=np.float64)
    b = parameter(np.ones((1, 4)), dtype=np.float64)
    c = parameter(np.ones(4), dtype=np.float64)
    loss = (a * b + c).sum()
    loss.backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (1, 4)
    assert c.grad.shape == (4,)
    assert np.allclose(b.grad, 3.0)
    assert np.allclose(c.grad, 3.0)


def test_mean_gradient():
    p = parameter(np.arange(6.0).reshape(2, 3), dtype=np.float64)
    p.mean().backward()
    assert np.allclose(p.grad, 1.0 / 6.0)


def test_reshape_gradient():
    p = parameter(np.arange(6.0), dtype=np.float64)
    loss = (p.reshape(2, 3) * np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).sum()
    loss.backward()
    assert np.allclose(p.grad, [1, 2, 3, 4, 5, 6])


def test_backward_needs_scalar():
    p = parameter(np.ones(3), dtype=np.float64)
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_nonfinite_rejected():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(NumericError):
        Tensor(np.array([np.inf]))


def test_nonfinite_from_op_names_op():
    big = Tensor(np.array([1e30], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError, match="mul"):
            big * big


def test_deep_graph_iterative_backward():
    # a recursive traversal would blow the interpreter stack here
    p = parameter([1.0], dtype=np.float64)
    node = p
    for _ in range(5000):
        node = node + 0.0
    node.backward()
    assert np.allclose(p.grad, [1.0])


def test_visits_each_node_once():
    # diamond graph: p feeds two branches that rejoin
    p = parameter([2.0], dtype=np.float64)
    a = p * 3.0
    b = p * 4.0
    (a + b).backward()
    assert np.allclose(p.grad, [7.0])


def test_no_grad_without_requires():
    x = Tensor(np.ones(3))
    p = parameter(np.ones(3), dtype=np.float64)
    loss = (x * p).sum()
    loss.backward()
    assert x.grad is None
    assert p.grad is not None


def test_default_dtype_is_float32():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float32
