"""Finite-difference verification suite covering every differentiable op.

Each entry builds small float64 inputs (no larger than 1x4x4x4x4), wraps
the op into a scalar-valued closure, and reports the max relative error
between tape gradients and central differences. ReLU and the pools are
checked at generic points (continuous random inputs, coordinates away
from the kink) where the finite difference is valid.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import AttentionParams, rca_forward
from .network import ModelConfig, build_model, forward
from .ops import (
    ChannelDescriptor,
    ConvSpec,
    conv1d_channel,
    conv3d,
    conv_transpose3d,
    global_avg_pool,
    global_max_pool,
    group_norm,
    max_pool3d,
)
from .train import soft_dice_ce_loss

TOLERANCE = 1e-4


def _t(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return T.build_tensor(arr.shape, arr, dtype=np.float64)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    x = x + np.sign(x) * gap
    return x


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Run every check; returns (name, max relative error) pairs."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, float]] = []

    def check(name, op, inputs):
        checks.append((name, T.grad_check(op, inputs)))

    check("sigmoid", lambda x: T.reduce_sum(T.sigmoid(x)), [_t(rng.normal(size=(1, 2, 3, 3, 3)))])
    check("relu", lambda x: T.reduce_sum(T.relu(x)), [_t(_away_from_zero(rng, (1, 2, 3, 3, 3)))])
    check(
        "add_mul_channel_broadcast",
        lambda a, b: T.reduce_sum(T.mul(T.add(a, a), b)),
        [_t(rng.normal(size=(1, 3, 2, 2, 2))), _t(rng.normal(size=(1, 3, 1, 1, 1)))],
    )

    spec = ConvSpec(2, 2, kernel=3, stride=1, padding=1)
    check(
        "conv3d",
        lambda x, w, b: T.reduce_sum(T.sigmoid(conv3d(x, spec, w, b))),
        [
            _t(rng.normal(size=(1, 2, 3, 3, 3))),
            _t(rng.normal(size=(2, 2, 3, 3, 3)) * 0.5),
            _t(rng.normal(size=2)),
        ],
    )
    up = ConvSpec(2, 2, kernel=2, stride=2, padding=0)
    check(
        "conv_transpose3d",
        lambda x, w: T.reduce_sum(T.sigmoid(conv_transpose3d(x, up, w))),
        [_t(rng.normal(size=(1, 2, 2, 2, 2))), _t(rng.normal(size=(2, 2, 2, 2, 2)) * 0.5)],
    )
    check(
        "max_pool3d",
        lambda x: T.reduce_sum(T.sigmoid(max_pool3d(x))),
        [_t(rng.normal(size=(1, 2, 4, 4, 4)))],
    )
    check(
        "global_max_pool",
        lambda x: T.reduce_sum(T.sigmoid(global_max_pool(x).values)),
        [_t(rng.normal(size=(1, 4, 3, 3, 3)))],
    )
    check(
        "global_avg_pool",
        lambda x: T.reduce_sum(T.sigmoid(global_avg_pool(x).values)),
        [_t(rng.normal(size=(1, 4, 3, 3, 3)))],
    )
    check(
        "conv1d_channel",
        lambda d, w: T.reduce_sum(T.sigmoid(conv1d_channel(ChannelDescriptor(d), w).values)),
        [_t(rng.normal(size=(1, 4, 1, 1, 1))), _t(rng.normal(size=3))],
    )
    check(
        "group_norm",
        lambda x, g, b: T.reduce_sum(T.sigmoid(group_norm(x, 2, g, b))),
        [
            _t(rng.normal(size=(1, 4, 2, 2, 2))),
            _t(rng.normal(size=4)),
            _t(rng.normal(size=4)),
        ],
    )
    check(
        "rca_forward",
        lambda x, w: T.reduce_sum(rca_forward(x, AttentionParams(w))),
        [_t(rng.normal(size=(1, 4, 2, 2, 2))), _t(rng.normal(size=3) * 0.4)],
    )
    labels = rng.integers(0, 4, size=(2, 2, 2))
    for kind in ("soft_dice", "dice_plus_ce"):
        check(
            f"soft_dice_ce_loss[{kind}]",
            lambda z, k=kind: soft_dice_ce_loss(z, labels, k),
            [_t(rng.normal(size=(1, 4, 2, 2, 2)))],
        )

    checks.extend(_model_checks(rng))
    return checks


def _model_checks(rng) -> list[tuple[str, float]]:
    """End-to-end checks through a tiny full model, for the input and a
    representative parameter of every kind."""
    cfg = ModelConfig(levels=2, base_width=8, norm_groups=4)
    model = build_model(cfg, seed=17, dtype=np.float64)
    # Zero attention kernels sit exactly at the gate's symmetric point;
    # perturb them so the check explores a generic configuration.
    for name, t in model.params.items():
        if name.endswith("attn.weight"):
            t.data += rng.normal(size=t.data.shape) * 0.2
    x_vals = rng.normal(size=(1, 4, 4, 4, 4))
    labels = rng.integers(0, 4, size=(4, 4, 4))

    def model_loss_wrt_input(x):
        return soft_dice_ce_loss(forward(model, x), labels)

    out = [("model[input]", T.grad_check(model_loss_wrt_input, [_t(x_vals)]))]

    x_fixed = _t(x_vals)
    for pname in ("enc0.conv1.weight", "enc1.norm2.gamma", "dec0.attn.weight", "head.bias"):
        def model_loss_wrt_param(p, pname=pname):
            original = model.params[pname]
            model.params[pname] = p
            try:
                return soft_dice_ce_loss(forward(model, x_fixed), labels)
            finally:
                model.params[pname] = original

        seed_param = _t(model.params[pname].data.copy())
        out.append((f"model[{pname}]", T.grad_check(model_loss_wrt_param, [seed_param])))
    return out


def suite_passes(results) -> bool:
    return all(err < TOLERANCE for _, err in results)
