"""Neural building blocks over 5-D feature tensors (N, C, D, H, W).

Convolutions are blocked direct kernels: a strided window view contracted
against the weights, which keeps the arithmetic identical to the naive
nested-loop definition while staying fast enough for desk-scale training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    EvenKernel,
    IndivisibleGroups,
    OddExtent,
    OutputCollapsed,
    ShapeMismatch,
)
from .tensor import Tensor, record_op


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeMismatch(f"expected 3 spatial values, got {v!r}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 3-D convolution; output extents must stay >= 1."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeMismatch("channel counts must be positive")

    def out_extents(self, spatial: tuple[int, int, int]) -> tuple[int, int, int]:
        out = tuple(
            (s + 2 * p - k) // st + 1
            for s, k, st, p in zip(spatial, self.kernel, self.stride, self.padding)
        )
        if any(o < 1 for o in out):
            raise OutputCollapsed(f"input {spatial} collapses to {out}")
        return out


@dataclass
class ChannelDescriptor:
    """Per-channel global statistic, shaped (N, C, 1, 1, 1)."""

    values: Tensor

    def __post_init__(self):
        s = self.values.shape
        if len(s) != 5 or s[2:] != (1, 1, 1):
            raise ShapeMismatch(f"descriptor shape {s} is not (N, C, 1, 1, 1)")

    @property
    def channels(self) -> int:
        return self.values.shape[1]


def _window_view(xp: np.ndarray, out_sp, kernel, stride) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sd, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, *out_sp, *kernel),
        strides=(sn, sc, sd * stride[0], sh * stride[1], sw * stride[2], sd, sh, sw),
        writeable=False,
    )


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    pd, ph, pw = padding
    if pd == ph == pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))


def conv3d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero padding, differentiable in x, weights, bias."""
    xd, wd = x.data, weights.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"conv3d input must be 5-D, got {xd.shape}")
    if any(k % 2 == 0 for k in spec.kernel):
        raise EvenKernel(f"conv3d kernel must be odd, got {spec.kernel}")
    expect_w = (spec.out_channels, spec.in_channels, *spec.kernel)
    if wd.shape != expect_w:
        raise ShapeMismatch(f"weights {wd.shape}, spec implies {expect_w}")
    if xd.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {xd.shape[1]} channels, spec {spec.in_channels}")
    if bias is not None and bias.data.shape != (spec.out_channels,):
        raise ShapeMismatch(f"bias {bias.data.shape} != ({spec.out_channels},)")

    stride, padding = spec.stride, spec.padding
    out_sp = spec.out_extents(xd.shape[2:])
    xp = _pad_spatial(xd, padding)
    view = _window_view(xp, out_sp, spec.kernel, stride)
    # (N, Do, Ho, Wo, O) <- contract C and the kernel taps
    out = np.tensordot(view, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    x_shape = xd.shape
    kernel = spec.kernel

    def backward(go):
        gx = _conv3d_grad_input(go, wd, x_shape, kernel, stride, padding)
        xp_b = _pad_spatial(xd, padding)
        view_b = _window_view(xp_b, out_sp, kernel, stride)
        gw = np.tensordot(go, view_b, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = go.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    inputs = [x, weights] + ([bias] if bias is not None else [])
    return record_op("conv3d", out, inputs, backward)


def _conv3d_grad_input(go, wd, x_shape, kernel, stride, padding):
    # Scatter go * w back through every kernel tap onto the padded input grid.
    n, c, d, h, w = x_shape
    pd, ph, pw = padding
    sd, sh, sw = stride
    kd, kh, kw = kernel
    do, ho, wo = go.shape[2:]
    gxp = np.zeros((n, c, d + 2 * pd, h + 2 * ph, w + 2 * pw), dtype=go.dtype)
    for rd in range(kd):
        for rh in range(kh):
            for rw in range(kw):
                tap = np.tensordot(go, wd[:, :, rd, rh, rw], axes=([1], [0]))
                tap = tap.transpose(0, 4, 1, 2, 3)
                gxp[:, :, rd : rd + sd * do : sd, rh : rh + sh * ho : sh, rw : rw + sw * wo : sw] += tap
    return np.ascontiguousarray(gxp[:, :, pd : pd + d, ph : ph + h, pw : pw + w])


def conv_transpose3d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of a stride-2 convolution; doubles every spatial extent.

    Restricted to kernel 2, stride 2, where output blocks do not overlap.
    Weights are (in, out, 2, 2, 2).
    """
    xd, wd = x.data, weights.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {xd.shape}")
    if spec.kernel != (2, 2, 2) or spec.stride != (2, 2, 2):
        raise ShapeMismatch("conv_transpose3d supports kernel 2, stride 2 only")
    expect_w = (spec.in_channels, spec.out_channels, 2, 2, 2)
    if wd.shape != expect_w:
        raise ShapeMismatch(f"weights {wd.shape}, spec implies {expect_w}")
    if xd.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"input has {xd.shape[1]} channels, spec {spec.in_channels}")

    n, c, d, h, w = xd.shape
    o = spec.out_channels
    # (N, D, H, W, O, 2, 2, 2) -> interleave the kernel taps into space
    t = np.tensordot(xd, wd, axes=([1], [0]))
    t = t.transpose(0, 4, 1, 5, 2, 6, 3, 7)
    out = np.ascontiguousarray(t).reshape(n, o, 2 * d, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward(go):
        gr = go.reshape(n, o, d, 2, h, 2, w, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
        gx = np.tensordot(gr, wd, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        gx = np.ascontiguousarray(gx.transpose(0, 4, 1, 2, 3))
        gw = np.tensordot(xd, gr, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = go.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    inputs = [x, weights] + ([bias] if bias is not None else [])
    return record_op("conv_transpose3d", out, inputs, backward)


def max_pool3d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping 2^3 max pool; gradient routes to the first argmax."""
    if window != 2:
        raise ShapeMismatch("only window 2 is supported")
    xd = x.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {xd.shape}")
    n, c, d, h, w = xd.shape
    if d % 2 or h % 2 or w % 2:
        raise OddExtent(f"spatial extents {(d, h, w)} must be even")
    d2, h2, w2 = d // 2, h // 2, w // 2
    blocks = xd.reshape(n, c, d2, 2, h2, 2, w2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    flat = np.ascontiguousarray(blocks).reshape(n, c, d2, h2, w2, 8)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(go):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], go[..., None], axis=-1)
        g = gflat.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (np.ascontiguousarray(g).reshape(n, c, d, h, w),)

    return record_op("max_pool3d", np.ascontiguousarray(out), [x], backward)


def global_max_pool(x: Tensor) -> ChannelDescriptor:
    """Per (batch, channel) maximum over all voxels."""
    xd = x.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {xd.shape}")
    n, c = xd.shape[:2]
    flat = xd.reshape(n, c, -1)
    arg = flat.argmax(axis=2)
    vals = np.take_along_axis(flat, arg[..., None], axis=2)[..., 0]
    out = np.ascontiguousarray(vals.reshape(n, c, 1, 1, 1))

    def backward(go):
        g = np.zeros_like(flat)
        np.put_along_axis(g, arg[..., None], go.reshape(n, c, 1), axis=2)
        return (g.reshape(xd.shape),)

    return ChannelDescriptor(record_op("global_max_pool", out, [x], backward))


def global_avg_pool(x: Tensor) -> ChannelDescriptor:
    """Per (batch, channel) mean over all voxels.

    Values are summed in sorted order so the result is bitwise invariant
    under any permutation of the voxels within a channel.
    """
    xd = x.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {xd.shape}")
    n, c = xd.shape[:2]
    m = xd[0, 0].size
    flat = np.sort(xd.reshape(n, c, -1), axis=2)
    out = (flat.sum(axis=2) / m).reshape(n, c, 1, 1, 1)

    def backward(go):
        g = go.reshape(n, c, 1, 1, 1) / m
        return (np.broadcast_to(g, xd.shape).copy(),)

    return ChannelDescriptor(record_op("global_avg_pool", np.ascontiguousarray(out), [x], backward))


def conv1d_channel(d: ChannelDescriptor, weights: Tensor) -> ChannelDescriptor:
    """1-D cross-correlation along the channel axis with zero padding.

    Output channel count equals input channel count; no bias. The same
    weight vector is shared wherever the caller reuses it.
    """
    wd = weights.data
    if wd.ndim != 1:
        raise ShapeMismatch(f"weights must be 1-D, got {wd.shape}")
    k = wd.shape[0]
    if k % 2 == 0:
        raise EvenKernel(f"kernel length {k} must be odd")
    t = d.values
    n, c = t.shape[:2]
    pad = (k - 1) // 2
    vals = t.data.reshape(n, c)
    buf = np.zeros((n, c + k - 1), dtype=vals.dtype)
    buf[:, pad : pad + c] = vals
    out = np.zeros((n, c), dtype=vals.dtype)
    for j in range(k):
        out += wd[j] * buf[:, j : j + c]

    def backward(go):
        g = go.reshape(n, c)
        gw = np.array([(g * buf[:, j : j + c]).sum() for j in range(k)], dtype=go.dtype)
        gbuf = np.zeros_like(buf)
        for j in range(k):
            gbuf[:, j : j + c] += wd[j] * g
        gd = gbuf[:, pad : pad + c].reshape(t.data.shape)
        return (gd, gw)

    out5 = np.ascontiguousarray(out.reshape(n, c, 1, 1, 1))
    return ChannelDescriptor(record_op("conv1d_channel", out5, [t, weights], backward))


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (batch, group) standardization followed by a per-channel affine."""
    xd = x.data
    if xd.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {xd.shape}")
    n, c, d, h, w = xd.shape
    if c % groups:
        raise IndivisibleGroups(f"{c} channels not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeMismatch("gamma/beta must be per-channel vectors")
    cg = c // groups
    xr = xd.reshape(n, groups, cg, d, h, w)
    mu = xr.mean(axis=(2, 3, 4, 5), keepdims=True)
    var = xr.var(axis=(2, 3, 4, 5), keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = (xr - mu) * inv
    gam = gamma.data.reshape(1, groups, cg, 1, 1, 1)
    bet = beta.data.reshape(1, groups, cg, 1, 1, 1)
    out = np.ascontiguousarray((xhat * gam + bet).reshape(n, c, d, h, w))
    m = cg * d * h * w

    def backward(go):
        gr = go.reshape(n, groups, cg, d, h, w)
        dgamma = (gr * xhat).sum(axis=(0, 3, 4, 5)).reshape(c)
        dbeta = gr.sum(axis=(0, 3, 4, 5)).reshape(c)
        dxhat = gr * gam
        s1 = dxhat.sum(axis=(2, 3, 4, 5), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(2, 3, 4, 5), keepdims=True)
        dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        return (np.ascontiguousarray(dx.reshape(xd.shape)), dgamma, dbeta)

    return record_op("group_norm", out, [x, gamma, beta], backward)


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate 5-D tensors along the channel axis; gradient splits back."""
    if not parts:
        raise ShapeMismatch("nothing to concatenate")
    ref = parts[0].data.shape
    for p in parts:
        s = p.data.shape
        if len(s) != 5 or s[0] != ref[0] or s[2:] != ref[2:]:
            raise ShapeMismatch(f"incompatible shapes {ref} and {s}")
    out = np.concatenate([p.data for p in parts], axis=1)
    sizes = [p.data.shape[1] for p in parts]

    def backward(go):
        grads = []
        start = 0
        for sz in sizes:
            grads.append(np.ascontiguousarray(go[:, start : start + sz]))
            start += sz
        return tuple(grads)

    return record_op("concat_channels", out, parts, backward)
