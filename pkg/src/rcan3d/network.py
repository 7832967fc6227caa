"""Encoder-decoder assembly: double-conv blocks with a channel attention
module after each, max-pool downsampling, transposed-conv upsampling, skip
concatenation, and a 1x1x1 classification head.

Channel widths double per level (base_width * 2^i). Calibrated features
feed both the next stage and the skip connection at their level.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttentionParams, rca_forward
from .errors import ConfigInvalid, ShapeMismatch
from .ops import ConvSpec, concat_channels, conv3d, conv_transpose3d, group_norm, max_pool3d
from .tensor import Tensor, relu


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    out_classes: int = 4
    levels: int = 4
    base_width: int = 16
    attention_k: int = 3
    norm_groups: int = 8
    use_max_pool: bool = True
    use_avg_pool: bool = True
    use_residual: bool = True

    def validate(self):
        if self.levels < 1:
            raise ConfigInvalid("levels must be >= 1")
        if self.in_channels < 1 or self.out_classes < 2:
            raise ConfigInvalid("need >= 1 input channel and >= 2 classes")
        if self.attention_k < 1 or self.attention_k % 2 == 0:
            raise ConfigInvalid("attention_k must be odd and positive")
        if self.base_width % self.norm_groups:
            raise ConfigInvalid(
                f"base_width {self.base_width} not divisible by norm_groups {self.norm_groups}"
            )
        if not (self.use_max_pool or self.use_avg_pool):
            raise ConfigInvalid("at least one attention pooling branch must stay on")

    @property
    def pool_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def width(self, level: int) -> int:
        return self.base_width * (2 ** level)

    def check_input_shape(self, shape):
        if len(shape) != 5:
            raise ShapeMismatch(f"expected 5-D input, got {shape}")
        if shape[1] != self.in_channels:
            raise ShapeMismatch(f"expected {self.in_channels} modalities, got {shape[1]}")
        f = self.pool_factor
        if any(s % f for s in shape[2:]):
            raise ConfigInvalid(f"spatial extents {shape[2:]} not divisible by {f}")


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    dtype: np.dtype = np.dtype(np.float32)

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


def _he_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministic initialization: He-uniform convs, unit norms, zero
    attention kernels (every gate starts at exactly 0.5)."""
    cfg.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def leaf(name, arr):
        if name in params:
            raise ConfigInvalid(f"duplicate parameter {name}")
        params[name] = Tensor(np.ascontiguousarray(arr, dtype=dtype), requires_grad=True)

    def double_conv(prefix, cin, cout):
        for idx, (ci, co) in enumerate(((cin, cout), (cout, cout)), start=1):
            leaf(f"{prefix}.conv{idx}.weight", _he_uniform(rng, (co, ci, 3, 3, 3), ci * 27, dtype))
            leaf(f"{prefix}.norm{idx}.gamma", np.ones(co, dtype=dtype))
            leaf(f"{prefix}.norm{idx}.beta", np.zeros(co, dtype=dtype))

    def attention(prefix):
        leaf(f"{prefix}.attn.weight", np.zeros(cfg.attention_k, dtype=dtype))

    for i in range(cfg.levels):
        cin = cfg.in_channels if i == 0 else cfg.width(i - 1)
        double_conv(f"enc{i}", cin, cfg.width(i))
        attention(f"enc{i}")
    for i in reversed(range(cfg.levels - 1)):
        leaf(
            f"up{i}.weight",
            _he_uniform(rng, (cfg.width(i + 1), cfg.width(i), 2, 2, 2), cfg.width(i + 1) * 8, dtype),
        )
        double_conv(f"dec{i}", 2 * cfg.width(i), cfg.width(i))
        attention(f"dec{i}")
    leaf("head.weight", _he_uniform(rng, (cfg.out_classes, cfg.base_width, 1, 1, 1), cfg.base_width, dtype))
    leaf("head.bias", np.zeros(cfg.out_classes, dtype=dtype))
    return Model(config=cfg, params=params, dtype=dtype)


def _block(m: Model, prefix: str, x: Tensor, cin: int, cout: int, probe) -> Tensor:
    p = m.params
    cfg = m.config
    for idx, ci in ((1, cin), (2, cout)):
        spec = ConvSpec(ci, cout, kernel=3, stride=1, padding=1, has_bias=False)
        x = conv3d(x, spec, p[f"{prefix}.conv{idx}.weight"])
        x = group_norm(x, cfg.norm_groups, p[f"{prefix}.norm{idx}.gamma"], p[f"{prefix}.norm{idx}.beta"])
        x = relu(x)
    attn = AttentionParams(
        p[f"{prefix}.attn.weight"],
        use_max_pool=cfg.use_max_pool,
        use_avg_pool=cfg.use_avg_pool,
        use_residual=cfg.use_residual,
    )
    return rca_forward(x, attn, probe=probe, name=f"{prefix}.attn")


def forward(m: Model, x: Tensor, probe: dict | None = None) -> Tensor:
    """Full-resolution class logits for a (1, in_channels, D, H, W) volume."""
    cfg = m.config
    cfg.check_input_shape(x.shape)
    skips = []
    for i in range(cfg.levels):
        cin = cfg.in_channels if i == 0 else cfg.width(i - 1)
        if i > 0:
            x = max_pool3d(x)
        x = _block(m, f"enc{i}", x, cin, cfg.width(i), probe)
        skips.append(x)
    for i in reversed(range(cfg.levels - 1)):
        up_spec = ConvSpec(cfg.width(i + 1), cfg.width(i), kernel=2, stride=2, padding=0, has_bias=False)
        x = conv_transpose3d(x, up_spec, m.params[f"up{i}.weight"])
        x = concat_channels([skips[i], x])
        x = _block(m, f"dec{i}", x, 2 * cfg.width(i), cfg.width(i), probe)
    head_spec = ConvSpec(cfg.base_width, cfg.out_classes, kernel=1, stride=1, padding=0)
    return conv3d(x, head_spec, m.params["head.weight"], m.params["head.bias"])


@dataclass
class ModelSummary:
    total_params: int
    attention_sites: int
    entries: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    def __str__(self):
        lines = [f"parameters: {self.total_params}", f"attention sites: {self.attention_sites}"]
        lines += [f"  {name:32s} {shape}" for name, shape in self.entries]
        return "\n".join(lines)


def describe(m: Model) -> ModelSummary:
    """Stable listing of every parameter with the closed-form total count."""
    entries = [(name, tuple(t.data.shape)) for name, t in m.params.items()]
    total = sum(int(np.prod(s)) for _, s in entries)
    sites = sum(1 for name, _ in entries if name.endswith("attn.weight"))
    return ModelSummary(total_params=total, attention_sites=sites, entries=entries)


def ablation_variants(cfg: ModelConfig) -> dict[str, ModelConfig]:
    """The four attention configurations exercised by the ablation harness."""
    return {
        "full": cfg,
        "no_max_pool": replace(cfg, use_max_pool=False),
        "no_avg_pool": replace(cfg, use_avg_pool=False),
        "no_residual": replace(cfg, use_residual=False),
    }
