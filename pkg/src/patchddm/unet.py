"""Memory-efficient 3D U-Net noise predictor.

Skip junctions average encoder and decoder activations instead of
concatenating them, so decoder widths equal encoder widths at every level
and the network accepts any input whose extents divide by the total
downsampling factor. Attention blocks are deliberately absent.

Blocks are residual: conv -> (+ timestep features) -> groupnorm -> SiLU ->
conv, with an identity shortcut (widths never change inside a block).
The final output convolution is zero-initialized, so a freshly built model
predicts exactly zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    averaging_combine,
    conv3d,
    groupnorm,
    linear,
    nearest_upsample,
    silu,
)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    out_channels: int = 1
    base_width: int = 8
    width_multiplier: float = 1.0
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 2
    kernel_size: int = 3
    time_embed_dim: int = 32
    norm_groups: int = 8

    def __post_init__(self):
        if not isinstance(self.channel_multipliers, tuple):
            object.__setattr__(self, "channel_multipliers",
                               tuple(self.channel_multipliers))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(
                f"channel counts must be >= 1, got in={self.in_channels} "
                f"out={self.out_channels}"
            )
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must not be empty")
        if self.blocks_per_level < 1:
            raise ValueError(f"blocks_per_level must be >= 1, got {self.blocks_per_level}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}")
        self.level_widths()  # raises on widths that round to zero

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def level_widths(self) -> tuple[int, ...]:
        widths = []
        for mult in self.channel_multipliers:
            w = int(round(self.base_width * self.width_multiplier * mult))
            if w < 1:
                raise ValueError(
                    f"width rounds to zero: base={self.base_width} "
                    f"multiplier={self.width_multiplier} level_mult={mult}"
                )
            widths.append(w)
        return tuple(widths)


def _norm_groups_for(width: int, requested: int) -> int:
    g = min(requested, width)
    while width % g:
        g -= 1
    return g


@dataclass(frozen=True)
class TimestepEmbedding:
    """Deterministic sinusoidal features of the integer timestep."""

    dim: int
    max_period: float = 10000.0

    def features(self, t: int) -> np.ndarray:
        half = self.dim // 2
        freqs = np.exp(-math.log(self.max_period) * np.arange(half) / half)
        angles = t * freqs
        return np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)


@dataclass
class ModelParams:
    """All learnable tensors keyed by a stable path name, plus the config."""

    config: UNetConfig
    params: dict[str, Tensor]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
        return out


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k**3
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, k, k, k)) * std).astype(np.float32)


def _linear_init(rng: np.random.Generator, nout: int, nin: int) -> np.ndarray:
    std = math.sqrt(2.0 / nin)
    return (rng.standard_normal((nout, nin)) * std).astype(np.float32)


def build_model(config: UNetConfig, seed: int) -> ModelParams:
    """Deterministically initialize all parameters for the given config."""
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    e = config.time_embed_dim
    widths = config.level_widths()
    params: dict[str, Tensor] = {}

    def p(name: str, data: np.ndarray) -> None:
        params[name] = Tensor(data, requires_grad=True)

    def block(prefix: str, width: int) -> None:
        p(f"{prefix}.conv1.kernel", _conv_init(rng, width, width, k))
        p(f"{prefix}.conv1.bias", np.zeros(width, dtype=np.float32))
        p(f"{prefix}.emb.weight", _linear_init(rng, width, e))
        p(f"{prefix}.emb.bias", np.zeros(width, dtype=np.float32))
        p(f"{prefix}.norm.gain", np.ones(width, dtype=np.float32))
        p(f"{prefix}.norm.bias", np.zeros(width, dtype=np.float32))
        p(f"{prefix}.conv2.kernel", _conv_init(rng, width, width, k))
        p(f"{prefix}.conv2.bias", np.zeros(width, dtype=np.float32))

    p("temb.lin1.weight", _linear_init(rng, e, e))
    p("temb.lin1.bias", np.zeros(e, dtype=np.float32))
    p("temb.lin2.weight", _linear_init(rng, e, e))
    p("temb.lin2.bias", np.zeros(e, dtype=np.float32))

    p("stem.kernel", _conv_init(rng, widths[0], config.in_channels, k))
    p("stem.bias", np.zeros(widths[0], dtype=np.float32))

    for lvl, width in enumerate(widths):
        for b in range(config.blocks_per_level):
            block(f"enc{lvl}.b{b}", width)
        if lvl < config.levels - 1:
            p(f"down{lvl}.kernel", _conv_init(rng, widths[lvl + 1], width, k))
            p(f"down{lvl}.bias", np.zeros(widths[lvl + 1], dtype=np.float32))

    for lvl in reversed(range(config.levels - 1)):
        p(f"up{lvl}.kernel", _conv_init(rng, widths[lvl], widths[lvl + 1], k))
        p(f"up{lvl}.bias", np.zeros(widths[lvl], dtype=np.float32))
        for b in range(config.blocks_per_level):
            block(f"dec{lvl}.b{b}", widths[lvl])

    p("head.norm.gain", np.ones(widths[0], dtype=np.float32))
    p("head.norm.bias", np.zeros(widths[0], dtype=np.float32))
    p("head.conv.kernel",
      np.zeros((config.out_channels, widths[0], k, k, k), dtype=np.float32))
    p("head.conv.bias", np.zeros(config.out_channels, dtype=np.float32))

    return ModelParams(config=config, params=params)


def _res_block(model: ModelParams, h: Tensor, emb: Tensor, prefix: str,
               width: int) -> Tensor:
    cfg = model.config
    p = model.params
    pad = cfg.kernel_size // 2
    r = conv3d(h, p[f"{prefix}.conv1.kernel"], p[f"{prefix}.conv1.bias"], padding=pad)
    scale = linear(emb, p[f"{prefix}.emb.weight"], p[f"{prefix}.emb.bias"])
    r = add(r, scale.reshape((width, 1, 1, 1)))
    groups = _norm_groups_for(width, cfg.norm_groups)
    r = groupnorm(r, groups, p[f"{prefix}.norm.gain"], p[f"{prefix}.norm.bias"])
    r = silu(r)
    r = conv3d(r, p[f"{prefix}.conv2.kernel"], p[f"{prefix}.conv2.bias"], padding=pad)
    return add(h, r)


def forward(model: ModelParams, x: Tensor, t: int) -> Tensor:
    """Predict the noise component of x at timestep t.

    Accepts any spatial extents divisible by the downsampling factor; the
    output keeps the input extents with config.out_channels channels.
    """
    cfg = model.config
    if x.data.ndim != 4 or x.shape[0] != cfg.in_channels:
        raise ValueError(
            f"forward: expected ({cfg.in_channels}, D, H, W), got {x.shape}"
        )
    factor = cfg.downsample_factor
    for extent in x.shape[1:]:
        if extent % factor:
            raise ValueError(
                f"forward: extent {extent} not divisible by downsampling "
                f"factor {factor}"
            )
    p = model.params
    widths = cfg.level_widths()
    pad = cfg.kernel_size // 2

    features = TimestepEmbedding(cfg.time_embed_dim).features(t)
    emb = Tensor(features.astype(x.data.dtype), dtype=x.data.dtype)
    emb = linear(emb, p["temb.lin1.weight"], p["temb.lin1.bias"])
    emb = silu(emb)
    emb = linear(emb, p["temb.lin2.weight"], p["temb.lin2.bias"])

    h = conv3d(x, p["stem.kernel"], p["stem.bias"], padding=pad)
    skips: list[Tensor] = []
    for lvl, width in enumerate(widths):
        for b in range(cfg.blocks_per_level):
            h = _res_block(model, h, emb, f"enc{lvl}.b{b}", width)
        if lvl < cfg.levels - 1:
            skips.append(h)
            h = conv3d(h, p[f"down{lvl}.kernel"], p[f"down{lvl}.bias"],
                       stride=2, padding=pad)

    for lvl in reversed(range(cfg.levels - 1)):
        h = nearest_upsample(h, 2)
        h = conv3d(h, p[f"up{lvl}.kernel"], p[f"up{lvl}.bias"], padding=pad)
        h = averaging_combine(skips.pop(), h)
        for b in range(cfg.blocks_per_level):
            h = _res_block(model, h, emb, f"dec{lvl}.b{b}", widths[lvl])

    groups = _norm_groups_for(widths[0], cfg.norm_groups)
    h = groupnorm(h, groups, p["head.norm.gain"], p["head.norm.bias"])
    h = silu(h)
    return conv3d(h, p["head.conv.kernel"], p["head.conv.bias"], padding=pad)


@dataclass(frozen=True)
class CostReport:
    """Analytic cost of one forward pass at a given cubic input extent.

    macs counts multiply-accumulates of convolution and affine layers only;
    peak bytes model float32 activations with operands freed at last use
    (the inference pattern) and, separately, the retain-everything total
    that training would hold for backprop.
    """

    macs: int
    peak_inference_bytes: int
    total_activation_bytes: int
    param_count: int


def count_flops_and_peak_memory(config: UNetConfig, input_extent: int) -> CostReport:
    if input_extent < config.downsample_factor:
        raise ValueError(
            f"input extent {input_extent} smaller than downsampling factor "
            f"{config.downsample_factor}"
        )
    if input_extent % config.downsample_factor:
        raise ValueError(
            f"input extent {input_extent} not divisible by "
            f"{config.downsample_factor}"
        )
    k = config.kernel_size
    e = config.time_embed_dim
    widths = config.level_widths()
    macs = 0
    total_bytes = 0
    live = 0
    peak = 0

    def voxels(extent: int) -> int:
        return extent**3

    def bytes_of(channels: int, extent: int) -> int:
        return channels * voxels(extent) * 4

    def alloc(nbytes: int) -> int:
        nonlocal live, peak, total_bytes
        live += nbytes
        total_bytes += nbytes
        peak = max(peak, live)
        return nbytes

    def free(nbytes: int) -> None:
        nonlocal live
        live -= nbytes

    def conv_cost(cin: int, cout: int, out_extent: int, ksize: int) -> None:
        nonlocal macs
        macs += cout * cin * ksize**3 * voxels(out_extent)

    def linear_cost(nin: int, nout: int) -> None:
        nonlocal macs
        macs += nout * nin

    # timestep features and MLP (extent-independent)
    linear_cost(e, e)
    linear_cost(e, e)
    emb_bytes = alloc(e * 4)

    extent = input_extent
    x_bytes = alloc(bytes_of(config.in_channels, extent))
    conv_cost(config.in_channels, widths[0], extent, k)
    h = alloc(bytes_of(widths[0], extent))
    free(x_bytes)

    def block_cost(width: int, ext: int) -> int:
        # conv1 -> +emb -> norm -> silu -> conv2 -> +shortcut; shortcut stays
        # live across the block, intermediates free at next op
        nonlocal h
        conv_cost(width, width, ext, k)
        linear_cost(e, width)
        r = alloc(bytes_of(width, ext))
        for _ in range(3):  # add-emb, norm, silu each produce a same-size buffer
            nxt = alloc(bytes_of(width, ext))
            free(r)
            r = nxt
        conv_cost(width, width, ext, k)
        nxt = alloc(bytes_of(width, ext))
        free(r)
        out = alloc(bytes_of(width, ext))
        free(nxt)
        free(h)
        return out

    skip_bytes: list[int] = []
    for lvl, width in enumerate(widths):
        for _ in range(config.blocks_per_level):
            h = block_cost(width, extent)
        if lvl < config.levels - 1:
            skip_bytes.append(h)  # retained until the decoder junction
            conv_cost(width, widths[lvl + 1], extent // 2, k)
            h = alloc(bytes_of(widths[lvl + 1], extent // 2))
            extent //= 2

    for lvl in reversed(range(config.levels - 1)):
        up = alloc(bytes_of(widths[lvl + 1], extent * 2))
        free(h)
        extent *= 2
        conv_cost(widths[lvl + 1], widths[lvl], extent, k)
        h = alloc(bytes_of(widths[lvl], extent))
        free(up)
        merged = alloc(bytes_of(widths[lvl], extent))
        free(h)
        free(skip_bytes.pop())
        h = merged
        for _ in range(config.blocks_per_level):
            h = block_cost(widths[lvl], extent)

    for _ in range(2):  # head norm + silu
        nxt = alloc(bytes_of(widths[0], extent))
        free(h)
        h = nxt
    conv_cost(widths[0], config.out_channels, extent, k)
    alloc(bytes_of(config.out_channels, extent))
    free(h)
    free(emb_bytes)

    param_count = build_param_count(config)
    return CostReport(
        macs=macs,
        peak_inference_bytes=peak,
        total_activation_bytes=total_bytes,
        param_count=param_count,
    )


def build_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count; matches build_model exactly."""
    k3 = config.kernel_size**3
    e = config.time_embed_dim
    widths = config.level_widths()
    n = 2 * (e * e + e)                      # time MLP
    n += widths[0] * config.in_channels * k3 + widths[0]   # stem

    def block_params(w: int) -> int:
        return (w * w * k3 + w) * 2 + (w * e + w) + 2 * w

    for lvl, w in enumerate(widths):
        n += config.blocks_per_level * block_params(w)
        if lvl < config.levels - 1:
            n += widths[lvl + 1] * w * k3 + widths[lvl + 1]
    for lvl in range(config.levels - 1):
        n += widths[lvl] * widths[lvl + 1] * k3 + widths[lvl]
        n += config.blocks_per_level * block_params(widths[lvl])
    n += 2 * widths[0]                        # head norm
    n += config.out_channels * widths[0] * k3 + config.out_channels
    return n
