"""Tensor construction, elementwise ops, broadcast, backward, grad_check."""

import itertools
import math

import numpy as np
import pytest

from rcan3d import tensor as T
from rcan3d.errors import (
    BroadcastError,
    DetachedTensor,
    EmptyShape,
    NotScalar,
    PreconditionViolation,
    ShapeMismatch,
)


def test_build_scalar():
    t = T.build_tensor([1], [0.0])
    assert t.shape == (1,)
    assert t.data[0] == 0.0


def test_build_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.build_tensor([2, 3], [1, 2, 3, 4, 5])


def test_build_empty_extent():
    with pytest.raises(EmptyShape):
        T.build_tensor([2, 0, 3], [])


def test_row_major_layout():
    vals = list(range(16))
    t = T.build_tensor([1, 2, 2, 2, 2], vals)
    assert t.data[0, 1, 1, 1, 1] == 15
    assert t.data[0, 0, 0, 0, 1] == 1


def test_row_major_round_trip_exhaustive():
    # All shapes with rank <= 5 and extents <= 4: sequential fill must equal
    # the row-major reshape of the same sequence.
    for rank in range(1, 6):
        for shape in itertools.product(range(1, 5), repeat=rank):
            n = math.prod(shape)
            t = T.build_tensor(shape, np.arange(n), dtype=np.float64)
            assert np.array_equal(t.data, np.arange(n, dtype=np.float64).reshape(shape))


def test_node_id_rules():
    plain = T.build_tensor([2], [1, 2])
    assert plain.node_id is None
    leaf = T.build_tensor([2], [1, 2], requires_grad=True)
    assert leaf.node_id is not None
    with T.Tape():
        taped = T.build_tensor([2], [1, 2])
        assert taped.node_id is not None


def test_sigmoid_values():
    t = T.build_tensor([3], [0.0, 1.0, -1.0], dtype=np.float64)
    y = T.sigmoid(t).data
    assert y[0] == 0.5
    assert y[1] == pytest.approx(0.7310585786300049, abs=1e-12)
    assert y[1] + y[2] == pytest.approx(1.0, abs=1e-12)


def test_sigmoid_open_interval():
    # Saturating inputs must still land strictly inside (0, 1).
    t = T.build_tensor([4], [-1e4, -50.0, 50.0, 1e4])
    y = T.sigmoid(t).data
    assert np.all(y > 0.0)
    assert np.all(y < 1.0)


def test_relu():
    t = T.build_tensor([2], [-3.0, 3.0])
    y = T.relu(t).data
    assert y[0] == 0.0
    assert y[1] == 3.0


def test_negate_scale():
    t = T.build_tensor([3], [1.0, -2.0, 0.5])
    assert np.array_equal(T.negate(t).data, [-1.0, 2.0, -0.5])
    assert np.array_equal(T.scale(t, 2.0).data, [2.0, -4.0, 1.0])


def test_map_unary_dispatch():
    t = T.build_tensor([1], [0.0])
    assert T.map_unary(t, "sigmoid").data[0] == 0.5
    with pytest.raises(PreconditionViolation):
        T.map_unary(t, "tanh")
    with pytest.raises(PreconditionViolation):
        T.map_unary(t, "scale")


def test_add_identity():
    rng = np.random.default_rng(0)
    x = T.build_tensor([1, 2, 2, 2, 2], rng.normal(size=16))
    z = T.build_tensor([1, 2, 2, 2, 2], np.zeros(16))
    assert np.array_equal(T.add(x, z).data, x.data)


def test_mul_channel_broadcast():
    a = T.build_tensor([1, 2, 1, 1, 2], [1, 2, 3, 4])
    b = T.build_tensor([1, 2, 1, 1, 1], [10, 100])
    out = T.mul(a, b).data
    assert np.array_equal(out.reshape(-1), [10, 20, 300, 400])


def test_broadcast_error():
    a = T.build_tensor([1, 2, 2, 2, 2], np.zeros(16))
    b = T.build_tensor([1, 3, 1, 1, 1], np.zeros(3))
    with pytest.raises(BroadcastError):
        T.add(a, b)


def test_backward_sum():
    with T.Tape() as tape:
        x = T.build_tensor([2, 3], np.arange(6), requires_grad=True)
        loss = T.reduce_sum(x)
        grads = T.backward(loss)
    assert np.array_equal(grads[x.node_id], np.ones((2, 3), dtype=np.float32))
    assert tape.grad(x) is not None


def test_backward_quadratic():
    vals = np.array([1.0, -2.0, 3.0], dtype=np.float32).reshape(1, 3, 1, 1, 1)
    with T.Tape():
        x = T.build_tensor(vals.shape, vals, requires_grad=True)
        loss = T.reduce_sum(T.mul(x, x))
        grads = T.backward(loss)
    assert np.allclose(grads[x.node_id], 2 * vals)


def test_backward_sigmoid_at_zero():
    with T.Tape():
        x = T.build_tensor([1], [0.0], requires_grad=True)
        loss = T.reduce_sum(T.sigmoid(x))
        grads = T.backward(loss)
    assert grads[x.node_id][0] == pytest.approx(0.25, abs=1e-7)


def test_backward_not_scalar():
    with T.Tape():
        x = T.build_tensor([2], [1.0, 2.0], requires_grad=True)
        y = T.add(x, x)
        with pytest.raises(NotScalar):
            T.backward(y)


def test_backward_detached():
    x = T.build_tensor([1], [1.0], requires_grad=True)
    with pytest.raises(DetachedTensor):
        T.backward(x)


def test_broadcast_gradient_matches_materialized():
    # Gradient through the channel broadcast must equal the explicit
    # sum over N, D, H, W of the unbroadcast gradient.
    rng = np.random.default_rng(7)
    a_vals = rng.normal(size=(2, 3, 2, 2, 2))
    b_vals = rng.normal(size=(1, 3, 1, 1, 1))
    with T.Tape():
        a = T.build_tensor(a_vals.shape, a_vals, requires_grad=True, dtype=np.float64)
        b = T.build_tensor(b_vals.shape, b_vals, requires_grad=True, dtype=np.float64)
        grads = T.backward(T.reduce_sum(T.mul(a, b)))
    got = grads[b.node_id]
    with T.Tape():
        a2 = T.build_tensor(a_vals.shape, a_vals, requires_grad=True, dtype=np.float64)
        bfull = T.build_tensor(
            a_vals.shape, np.broadcast_to(b_vals, a_vals.shape).copy(),
            requires_grad=True, dtype=np.float64,
        )
        grads_full = T.backward(T.reduce_sum(T.mul(a2, bfull)))
    want = grads_full[bfull.node_id].sum(axis=(0, 2, 3, 4), keepdims=True)
    assert np.allclose(got, want, atol=1e-12)


def test_grad_check_linear_is_exact():
    x = T.build_tensor([5], np.linspace(-1, 1, 5), dtype=np.float64)
    err = T.grad_check(lambda t: T.reduce_sum(t), [x])
    assert err < 1e-9


def test_grad_check_composite():
    rng = np.random.default_rng(3)
    x = T.build_tensor([1, 2, 2, 2, 2], rng.normal(size=16), dtype=np.float64)
    b = T.build_tensor([1, 2, 1, 1, 1], rng.normal(size=2), dtype=np.float64)

    def op(xt, bt):
        return T.reduce_sum(T.sigmoid(T.mul(xt, bt)))

    assert T.grad_check(op, [x, b]) < 1e-6


def test_grad_check_eps_gate():
    x = T.build_tensor([2], [0.1, 0.2], dtype=np.float64)
    with pytest.raises(PreconditionViolation):
        T.grad_check(lambda t: T.reduce_sum(t), [x], eps=1e-1)


def test_grad_check_rejects_float32():
    x = T.build_tensor([2], [0.1, 0.2], dtype=np.float32)
    with pytest.raises(PreconditionViolation):
        T.grad_check(lambda t: T.reduce_sum(t), [x])
