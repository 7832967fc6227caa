"""Convolution, pooling, channel conv and group norm against brute-force oracles."""

import numpy as np
import pytest

from rcan3d import ops, tensor as T
from rcan3d.errors import (
    EvenKernel,
    IndivisibleGroups,
    OddExtent,
    OutputCollapsed,
    ShapeMismatch,
)

from oracles import conv3d_reference, conv_transpose3d_reference


def tt(arr, requires_grad=False):
    arr = np.asarray(arr)
    return T.build_tensor(arr.shape, arr, requires_grad=requires_grad, dtype=arr.dtype)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------


def test_conv3d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 3, 3, 3))
    spec = ops.ConvSpec(1, 1, kernel=1, stride=1, padding=0, has_bias=False)
    out = ops.conv3d(tt(x), spec, tt(np.ones((1, 1, 1, 1, 1))))
    assert np.array_equal(out.data, x)


def test_conv3d_zero_weights():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    spec = ops.ConvSpec(2, 3)
    out = ops.conv3d(tt(x), spec, tt(np.zeros((3, 2, 3, 3, 3))), tt(np.zeros(3)))
    assert np.all(out.data == 0)


def test_conv3d_neighbor_count():
    # All-ones input and kernel with padding 1 counts in-bounds neighbors.
    x = np.ones((1, 1, 2, 2, 2))
    w = np.ones((1, 1, 3, 3, 3))
    spec = ops.ConvSpec(1, 1, kernel=3, padding=1, has_bias=False)
    out = ops.conv3d(tt(x), spec, tt(w)).data
    assert out[0, 0, 0, 0, 0] == 8.0
    assert out.shape == (1, 1, 2, 2, 2)
    assert np.all(out == 8.0)


def test_conv3d_matches_reference_many_cases():
    rng = np.random.default_rng(42)
    for _ in range(30):
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 4))
        sp = tuple(int(rng.integers(2, 6)) for _ in range(3))
        k = int(rng.choice([1, 3]))
        pad = int(rng.integers(0, 2))
        stride = int(rng.choice([1, 2]))
        if any((s + 2 * pad - k) < 0 for s in sp):
            continue
        x = rng.normal(size=(1, c, *sp))
        w = rng.normal(size=(o, c, k, k, k))
        b = rng.normal(size=o)
        spec = ops.ConvSpec(c, o, kernel=k, stride=stride, padding=pad)
        got = ops.conv3d(tt(x), spec, tt(w), tt(b)).data
        want = conv3d_reference(x, w, b, (stride,) * 3, (pad,) * 3)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10


def test_conv3d_shape_errors():
    x = tt(np.zeros((1, 2, 4, 4, 4)))
    spec = ops.ConvSpec(2, 3)
    with pytest.raises(ShapeMismatch):
        ops.conv3d(x, spec, tt(np.zeros((3, 2, 3, 3, 1))))
    with pytest.raises(OutputCollapsed):
        ops.ConvSpec(2, 3, kernel=5, padding=0).out_extents((4, 4, 4))
    with pytest.raises(EvenKernel):
        ops.conv3d(x, ops.ConvSpec(2, 3, kernel=(2, 3, 3), padding=0), tt(np.zeros((3, 2, 2, 3, 3))))


def test_conv3d_grad_check():
    rng = np.random.default_rng(5)
    x = tt(rng.normal(size=(1, 2, 3, 3, 3)))
    w = tt(rng.normal(size=(2, 2, 3, 3, 3)))
    b = tt(rng.normal(size=2))
    spec = ops.ConvSpec(2, 2, kernel=3, padding=1)

    def op(xt, wt, bt):
        return T.reduce_sum(ops.conv3d(xt, spec, wt, bt))

    assert T.grad_check(op, [x, w, b]) < 1e-6


def test_conv3d_strided_grad_check():
    rng = np.random.default_rng(6)
    x = tt(rng.normal(size=(1, 1, 5, 5, 5)))
    w = tt(rng.normal(size=(2, 1, 3, 3, 3)))
    spec = ops.ConvSpec(1, 2, kernel=3, stride=2, padding=1, has_bias=False)

    def op(xt, wt):
        return T.reduce_sum(T.sigmoid(ops.conv3d(xt, spec, wt)))

    # Relative-error denominator blows up FD noise on near-zero gradient
    # coordinates; the linear-path tests pin exactness separately.
    assert T.grad_check(op, [x, w]) < 1e-4


# ---------------------------------------------------------------------------
# conv_transpose3d
# ---------------------------------------------------------------------------

UP = ops.ConvSpec(1, 1, kernel=2, stride=2, padding=0, has_bias=False)


def test_transpose_single_source():
    x = np.full((1, 1, 1, 1, 1), 3.5)
    w = np.ones((1, 1, 2, 2, 2))
    out = ops.conv_transpose3d(tt(x), UP, tt(w)).data
    assert out.shape == (1, 1, 2, 2, 2)
    assert np.all(out == 3.5)


def test_transpose_zero_input():
    spec = ops.ConvSpec(2, 3, kernel=2, stride=2, padding=0)
    out = ops.conv_transpose3d(tt(np.zeros((1, 2, 2, 2, 2))), spec, tt(np.ones((2, 3, 2, 2, 2))))
    assert np.all(out.data == 0)


def test_transpose_matches_zero_stuffing_oracle():
    rng = np.random.default_rng(9)
    for _ in range(10):
        c = int(rng.integers(1, 3))
        o = int(rng.integers(1, 3))
        sp = tuple(int(rng.integers(1, 4)) for _ in range(3))
        x = rng.normal(size=(1, c, *sp))
        w = rng.normal(size=(c, o, 2, 2, 2))
        spec = ops.ConvSpec(c, o, kernel=2, stride=2, padding=0)
        got = ops.conv_transpose3d(tt(x), spec, tt(w)).data
        want = conv_transpose3d_reference(x, w)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10


def test_transpose_grad_check():
    rng = np.random.default_rng(10)
    x = tt(rng.normal(size=(1, 2, 2, 2, 2)))
    w = tt(rng.normal(size=(2, 2, 2, 2, 2)))
    spec = ops.ConvSpec(2, 2, kernel=2, stride=2, padding=0)

    def op(xt, wt):
        return T.reduce_sum(T.sigmoid(ops.conv_transpose3d(xt, spec, wt)))

    assert T.grad_check(op, [x, w]) < 1e-6


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def test_max_pool_constant():
    out = ops.max_pool3d(tt(np.full((1, 2, 4, 4, 4), 2.5))).data
    assert out.shape == (1, 2, 2, 2, 2)
    assert np.all(out == 2.5)


def test_max_pool_block_max():
    x = np.arange(1, 9, dtype=np.float64).reshape(1, 1, 2, 2, 2)
    assert ops.max_pool3d(tt(x)).data.reshape(()) == 8.0


def test_max_pool_odd_extent():
    with pytest.raises(OddExtent):
        ops.max_pool3d(tt(np.zeros((1, 1, 3, 4, 4))))


def test_max_pool_tie_routes_to_first():
    x = np.zeros((1, 1, 2, 2, 2))
    x[0, 0, 0, 0, 0] = 5.0
    x[0, 0, 0, 0, 1] = 5.0
    with T.Tape():
        xt = tt(x)
        xt.requires_grad = True
        loss = T.reduce_sum(ops.max_pool3d(xt))
        grads = T.backward(loss)
    g = grads[xt.node_id]
    assert g[0, 0, 0, 0, 0] == 1.0
    assert g[0, 0, 0, 0, 1] == 0.0
    assert g.sum() == 1.0


def test_global_max_pool_values():
    x = np.zeros((1, 2, 2, 2, 1))
    x[0, 0] = np.array([1, 2, 3, 4]).reshape(2, 2, 1)
    x[0, 1] = 7.0
    d = ops.global_max_pool(tt(x))
    assert d.values.shape == (1, 2, 1, 1, 1)
    assert d.values.data[0, 0, 0, 0, 0] == 4.0
    assert d.values.data[0, 1, 0, 0, 0] == 7.0


def test_global_max_pool_matches_scan():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(1, 3, 4, 4, 4))
    got = ops.global_max_pool(tt(x)).values.data.reshape(3)
    want = np.array([x[0, c].max() for c in range(3)])
    assert np.array_equal(got, want)


def test_global_avg_pool_values():
    x = np.zeros((1, 1, 2, 2, 1))
    x[0, 0] = np.array([1, 2, 3, 4]).reshape(2, 2, 1)
    assert ops.global_avg_pool(tt(x)).values.data.reshape(()) == 2.5


def test_global_pools_permutation_invariant():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(1, 3, 4, 4, 4)).astype(np.float32)
    base_max = ops.global_max_pool(tt(x)).values.data.copy()
    base_avg = ops.global_avg_pool(tt(x)).values.data.copy()
    for _ in range(20):
        xp = x.copy()
        for c in range(3):
            flat = xp[0, c].reshape(-1)
            xp[0, c] = rng.permutation(flat).reshape(4, 4, 4)
        assert np.array_equal(ops.global_max_pool(tt(xp)).values.data, base_max)
        assert np.array_equal(ops.global_avg_pool(tt(xp)).values.data, base_avg)


def test_global_avg_pool_grad_check():
    rng = np.random.default_rng(13)
    x = tt(rng.normal(size=(1, 3, 2, 2, 2)))

    def op(xt):
        return T.reduce_sum(ops.global_avg_pool(xt).values)

    assert T.grad_check(op, [x]) < 1e-6


def test_global_max_pool_grad_check():
    rng = np.random.default_rng(14)
    x = tt(rng.normal(size=(1, 2, 2, 2, 2)))

    def op(xt):
        return T.reduce_sum(T.sigmoid(ops.global_max_pool(xt).values))

    assert T.grad_check(op, [x]) < 1e-6


# ---------------------------------------------------------------------------
# conv1d_channel
# ---------------------------------------------------------------------------


def desc(vals):
    vals = np.asarray(vals, dtype=np.float64)
    return ops.ChannelDescriptor(tt(vals.reshape(1, -1, 1, 1, 1)))


def test_conv1d_identity_tap():
    for k in (1, 3, 5, 7):
        w = np.zeros(k)
        w[k // 2] = 1.0
        d = desc([1.0, -2.0, 3.0, 0.25])
        out = ops.conv1d_channel(d, tt(w))
        assert np.array_equal(out.values.data, d.values.data)


def test_conv1d_zero_weights():
    out = ops.conv1d_channel(desc([1, 2, 3]), tt(np.zeros(3)))
    assert np.all(out.values.data == 0)


def test_conv1d_box_kernel():
    out = ops.conv1d_channel(desc([1, 2, 3]), tt(np.ones(3)))
    assert np.array_equal(out.values.data.reshape(-1), [3.0, 6.0, 5.0])


def test_conv1d_even_kernel_rejected():
    with pytest.raises(EvenKernel):
        ops.conv1d_channel(desc([1, 2, 3]), tt(np.ones(4)))


def test_conv1d_grad_check():
    rng = np.random.default_rng(15)
    vals = tt(rng.normal(size=(1, 5, 1, 1, 1)))
    w = tt(rng.normal(size=3))

    def op(vt, wt):
        return T.reduce_sum(ops.conv1d_channel(ops.ChannelDescriptor(vt), wt).values)

    assert T.grad_check(op, [vals, w]) < 1e-6


# ---------------------------------------------------------------------------
# group_norm
# ---------------------------------------------------------------------------


def test_group_norm_constant_input():
    x = tt(np.full((1, 4, 2, 2, 2), 3.0))
    out = ops.group_norm(x, 2, tt(np.ones(4)), tt(np.zeros(4)))
    assert np.all(out.data == 0.0)


def test_group_norm_moments():
    rng = np.random.default_rng(16)
    x = rng.normal(loc=2.0, scale=3.0, size=(1, 8, 4, 4, 4))
    out = ops.group_norm(tt(x), 4, tt(np.ones(8)), tt(np.zeros(8))).data
    grouped = out.reshape(1, 4, 2, 4, 4, 4)
    means = grouped.mean(axis=(2, 3, 4, 5))
    variances = grouped.var(axis=(2, 3, 4, 5))
    assert np.all(np.abs(means) < 1e-5)
    assert np.allclose(variances, 1.0, atol=1e-3)


def test_group_norm_affine_collapse():
    rng = np.random.default_rng(17)
    x = tt(rng.normal(size=(1, 4, 2, 2, 2)))
    out = ops.group_norm(x, 2, tt(np.zeros(4)), tt(np.full(4, 7.0)))
    assert np.all(out.data == 7.0)


def test_group_norm_indivisible():
    x = tt(np.zeros((1, 6, 2, 2, 2)))
    with pytest.raises(IndivisibleGroups):
        ops.group_norm(x, 4, tt(np.ones(6)), tt(np.zeros(6)))


def test_group_norm_grad_check():
    rng = np.random.default_rng(18)
    x = tt(rng.normal(size=(1, 4, 2, 2, 2)))
    gamma = tt(rng.normal(size=4))
    beta = tt(rng.normal(size=4))

    def op(xt, gt, bt):
        return T.reduce_sum(T.sigmoid(ops.group_norm(xt, 2, gt, bt)))

    assert T.grad_check(op, [x, gamma, beta]) < 1e-5


# ---------------------------------------------------------------------------
# concat
# ---------------------------------------------------------------------------


def test_concat_channels_roundtrip():
    rng = np.random.default_rng(19)
    a = rng.normal(size=(1, 2, 2, 2, 2))
    b = rng.normal(size=(1, 3, 2, 2, 2))
    out = ops.concat_channels([tt(a), tt(b)])
    assert out.shape == (1, 5, 2, 2, 2)
    assert np.array_equal(out.data[:, :2], a)
    assert np.array_equal(out.data[:, 2:], b)


def test_concat_channels_grad_check():
    rng = np.random.default_rng(20)
    a = tt(rng.normal(size=(1, 2, 2, 2, 2)))
    b = tt(rng.normal(size=(1, 1, 2, 2, 2)))

    def op(at, bt):
        return T.reduce_sum(T.sigmoid(ops.concat_channels([at, bt])))

    assert T.grad_check(op, [a, b]) < 1e-6
