"""Residual channel attention: global descriptors, shared channel
convolution, sigmoid gating, and residual calibration.

The gate for each channel is computed from both the max- and avg-pooled
descriptors passed through one shared 1-D kernel, so a single weight
vector drives both branches. Ablation flags drop a pooling branch (its
pre-activation contribution becomes exactly zero) or the residual path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BothBranchesDisabled, EvenKernel, PreconditionViolation, ShapeMismatch
from .ops import conv1d_channel, global_avg_pool, global_max_pool
from .tensor import Tensor, add, mul, sigmoid


@dataclass
class AttentionParams:
    """Shared channel-conv weights plus the ablation switches.

    One instance (one weight vector) per attention site in a network.
    """

    weights: Tensor
    use_max_pool: bool = True
    use_avg_pool: bool = True
    use_residual: bool = True

    def __post_init__(self):
        w = self.weights.data
        if w.ndim != 1:
            raise ShapeMismatch(f"attention weights must be 1-D, got {w.shape}")
        if w.shape[0] % 2 == 0:
            raise EvenKernel(f"attention kernel length {w.shape[0]} must be odd")
        if not (self.use_max_pool or self.use_avg_pool):
            raise BothBranchesDisabled("need at least one pooling branch")

    @property
    def k(self) -> int:
        return self.weights.data.shape[0]


@dataclass
class AttentionMap:
    """Per-channel gate in the open interval (0, 1), shape (N, C, 1, 1, 1)."""

    values: Tensor

    def __post_init__(self):
        s = self.values.shape
        if len(s) != 5 or s[2:] != (1, 1, 1):
            raise ShapeMismatch(f"attention map shape {s} is not (N, C, 1, 1, 1)")


def attention_map(x: Tensor, p: AttentionParams) -> AttentionMap:
    """Sigmoid of the summed branch responses; disabled branches contribute zero."""
    if x.data.ndim != 5:
        raise ShapeMismatch(f"input must be 5-D, got {x.shape}")
    pre = None
    if p.use_max_pool:
        pre = conv1d_channel(global_max_pool(x), p.weights).values
    if p.use_avg_pool:
        avg_branch = conv1d_channel(global_avg_pool(x), p.weights).values
        pre = avg_branch if pre is None else add(pre, avg_branch)
    return AttentionMap(sigmoid(pre))


def calibrate(x: Tensor, m: AttentionMap, use_residual: bool = True) -> Tensor:
    """Channel-wise gate multiply, then elementwise add of the identity path."""
    if m.values.shape[1] != x.shape[1]:
        raise ShapeMismatch(
            f"gate has {m.values.shape[1]} channels, features have {x.shape[1]}"
        )
    gated = mul(x, m.values)
    if use_residual:
        return add(gated, x)
    return gated


def rca_forward(x: Tensor, p: AttentionParams, probe: dict | None = None, name: str = "") -> Tensor:
    """Full attention module: map the gates, then calibrate the features.

    ``probe`` optionally collects the gate values under ``name`` so callers
    can observe intermediate attention maps.
    """
    m = attention_map(x, p)
    if probe is not None:
        probe[name or "rca"] = m.values.data.copy()
    return calibrate(x, m, p.use_residual)
