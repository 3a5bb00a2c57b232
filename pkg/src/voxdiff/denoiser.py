"""Noise-prediction network for latent-grid diffusion.

The estimator is a "U-in-U" design: an outer volumetric U-Net runs over the
(D/P)^3 latent grid at progressively coarser resolutions, while an inner
pathway stays at full latent resolution throughout. The inner pathway taps the
outer stem features, refines each grid cell independently with 1x1x1 residual
blocks, optionally mixes cells with one spatial self-attention block, and is
channel-concatenated back onto the outer features right before the output
projection. Three flags (`inner_enabled`, `inner_attention_enabled`,
`inout_concat_enabled`) switch these pieces off individually, which is how the
plain-U-Net baseline and the ablation variants are produced.

Conditioning enters in two ways: a sinusoidal timestep embedding feeds a
per-residual-block feature-wise scale/shift, and caption tokens feed
cross-attention blocks at the two coarsest outer resolutions.

Layout is channels-last throughout: latent grids are (B, S, S, S, C) arrays
with S = latent_side.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from voxdiff.nn import (
    Conv3d,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    Tensor,
    concat,
    silu,
    softmax,
    upsample_nearest3,
)


@dataclasses.dataclass(frozen=True)
class UinUNetConfig:
    """Architecture hyperparameters; widths double at each coarser level."""

    latent_side: int = 8
    in_channels: int = 4
    base_width: int = 64
    depth: int = 3
    inner_enabled: bool = True
    inner_blocks: int = 4
    inner_attention_enabled: bool = True
    inout_concat_enabled: bool = True
    time_embed_dim: int = 64
    cond_embed_dim: int = 64
    num_heads: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        stride_total = 2 ** (self.depth - 1)
        if self.latent_side < 1 or self.latent_side % stride_total != 0:
            raise ValueError(
                f"latent_side ({self.latent_side}) must be a positive multiple of "
                f"2^(depth-1) = {stride_total}")
        for name in ("in_channels", "base_width", "time_embed_dim",
                     "cond_embed_dim", "num_heads", "inner_blocks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.time_embed_dim % 2 != 0:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.base_width % self.num_heads != 0:
            raise ValueError(
                f"num_heads ({self.num_heads}) must divide base_width ({self.base_width})")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UinUNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown denoiser config keys: {unknown}")
        return cls(**d)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(t*w_k), cos(t*w_k)], w_k log-spaced in [1, 1e-4].

    ``t`` may be a scalar or a 1-d array of steps; the result has shape
    ``(dim,)`` or ``(len(t), dim)``. Steps must be >= 0 and ``dim`` even.
    """
    if dim <= 0 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be a positive even number, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timestep must be >= 0")
    half = dim // 2
    # log-spaced angular frequencies from 1 down to 1/10000
    exponents = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    omega = np.exp(-np.log(10000.0) * exponents)
    phase = t_arr[..., None] * omega
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class ResBlock3d(Module):
    """Residual block with normalization, two convolutions, and a per-channel
    scale/shift computed from the time features.

    ``kernel_size=3`` gives the outer blocks their neighborhood; ``kernel_size=1``
    with ``cell_local=True`` switches to per-cell layer normalization so the
    block touches each grid cell independently.
    """

    def __init__(self, in_channels: int, out_channels: int, time_width: int,
                 rng: np.random.Generator, kernel_size: int = 3,
                 cell_local: bool = False, dtype=np.float32):
        pad = kernel_size // 2
        if cell_local:
            self.norm1 = LayerNorm(in_channels, dtype=dtype)
            self.norm2 = LayerNorm(out_channels, dtype=dtype)
        else:
            self.norm1 = GroupNorm(_norm_groups(in_channels), in_channels, dtype=dtype)
            self.norm2 = GroupNorm(_norm_groups(out_channels), out_channels, dtype=dtype)
        self.conv1 = Conv3d(in_channels, out_channels, kernel_size, rng,
                            padding=pad, dtype=dtype)
        self.conv2 = Conv3d(out_channels, out_channels, kernel_size, rng,
                            padding=pad, dtype=dtype, zero_init=True)
        # zero-initialized so every block starts as an identity mapping
        self.time_scale = Linear(time_width, out_channels, rng, dtype=dtype,
                                 zero_init=True)
        self.time_shift = Linear(time_width, out_channels, rng, dtype=dtype,
                                 zero_init=True)
        if in_channels != out_channels:
            self.skip = Conv3d(in_channels, out_channels, 1, rng, dtype=dtype)
        else:
            self.skip = None

    def forward(self, x: Tensor, time_feats: Tensor) -> Tensor:
        h = self.conv1(silu(self.norm1(x)))
        b = time_feats.shape[0]
        scale = self.time_scale(time_feats).reshape(b, 1, 1, 1, -1)
        shift = self.time_shift(time_feats).reshape(b, 1, 1, 1, -1)
        h = self.norm2(h) * (scale + 1.0) + shift
        h = self.conv2(silu(h))
        res = x if self.skip is None else self.skip(x)
        return res + h


class TokenAttention(Module):
    """Multi-head attention over token sequences (B, S, C), pre-normalized,
    with a residual connection. Self-attention when ``context_dim`` is None,
    otherwise queries come from the tokens and keys/values from the context.
    """

    def __init__(self, width: int, num_heads: int, rng: np.random.Generator,
                 context_dim: int | None = None, dtype=np.float32):
        if width % num_heads != 0:
            raise ValueError(f"num_heads ({num_heads}) must divide width ({width})")
        kv_dim = width if context_dim is None else context_dim
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.is_self = context_dim is None
        self.norm = LayerNorm(width, dtype=dtype)
        self.to_q = Linear(width, width, rng, dtype=dtype)
        self.to_k = Linear(kv_dim, width, rng, dtype=dtype)
        self.to_v = Linear(kv_dim, width, rng, dtype=dtype)
        self.to_out = Linear(width, width, rng, dtype=dtype, zero_init=True)

    def _split_heads(self, x: Tensor) -> Tensor:
        b, n = x.shape[0], x.shape[1]
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, tokens: Tensor, context: Tensor | None = None) -> Tensor:
        src = self.norm(tokens)
        ctx = src if self.is_self else context
        q = self._split_heads(self.to_q(src))
        k = self._split_heads(self.to_k(ctx))
        v = self._split_heads(self.to_v(ctx))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        mixed = softmax(scores, axis=-1) @ v
        b, n = tokens.shape[0], tokens.shape[1]
        merged = mixed.transpose(0, 2, 1, 3).reshape(b, n, -1)
        return tokens + self.to_out(merged)


class CrossAttention3d(Module):
    """Cross-attention between a feature volume and conditioning tokens."""

    def __init__(self, width: int, context_dim: int, num_heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.attn = TokenAttention(width, num_heads, rng, context_dim=context_dim,
                                   dtype=dtype)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, sx, sy, sz, c = x.shape
        tokens = x.reshape(b, sx * sy * sz, c)
        mixed = self.attn(tokens, cond)
        return mixed.reshape(b, sx, sy, sz, c)


class SpatialTransformer(Module):
    """One self-attention + feed-forward block over the grid cells as tokens,
    with a learned additive position embedding per cell.
    """

    def __init__(self, num_tokens: int, width: int, num_heads: int,
                 rng: np.random.Generator, dtype=np.float32):
        pos = rng.normal(0.0, 0.02, size=(num_tokens, width))
        self.position = Tensor(pos.astype(dtype), requires_grad=True)
        self.attn = TokenAttention(width, num_heads, rng, dtype=dtype)
        self.ff_norm = LayerNorm(width, dtype=dtype)
        self.ff_in = Linear(width, 2 * width, rng, dtype=dtype)
        self.ff_out = Linear(2 * width, width, rng, dtype=dtype, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        b, sx, sy, sz, c = x.shape
        tokens = x.reshape(b, sx * sy * sz, c) + self.position
        tokens = self.attn(tokens)
        tokens = tokens + self.ff_out(silu(self.ff_in(self.ff_norm(tokens))))
        return tokens.reshape(b, sx, sy, sz, c)


class UinUNet(Module):
    """Noise estimator mapping (z_t, t, caption tokens) -> predicted noise.

    See the module docstring for the wiring. The output projection is
    zero-initialized, so a freshly constructed network predicts exactly zero.
    """

    def __init__(self, config: UinUNetConfig, rng: np.random.Generator,
                 dtype=np.float32):
        cfg = config
        self.config = cfg
        depth, width = cfg.depth, cfg.base_width
        widths = [width * 2 ** i for i in range(depth)]
        self._widths = widths
        # cross-attention sits at the two coarsest resolutions
        self._attn_levels = [i for i in range(depth) if i >= max(0, depth - 2)]
        time_width = 4 * width
        self._time_width = time_width
        self._dtype = dtype

        self.time_in = Linear(cfg.time_embed_dim, time_width, rng, dtype=dtype)
        self.time_out = Linear(time_width, time_width, rng, dtype=dtype)

        self.stem = Conv3d(cfg.in_channels, width, 3, rng, padding=1, dtype=dtype)

        self.down_res = ModuleList(
            ResBlock3d(widths[i], widths[i], time_width, rng, dtype=dtype)
            for i in range(depth))
        self.down_attn = ModuleList(
            CrossAttention3d(widths[i], cfg.cond_embed_dim, cfg.num_heads, rng,
                             dtype=dtype)
            for i in self._attn_levels)
        self.downs = ModuleList(
            Conv3d(widths[i], widths[i + 1], 3, rng, stride=2, padding=1, dtype=dtype)
            for i in range(depth - 1))

        self.mid_res1 = ResBlock3d(widths[-1], widths[-1], time_width, rng, dtype=dtype)
        self.mid_attn = CrossAttention3d(widths[-1], cfg.cond_embed_dim,
                                         cfg.num_heads, rng, dtype=dtype)
        self.mid_res2 = ResBlock3d(widths[-1], widths[-1], time_width, rng, dtype=dtype)

        self.up_res = ModuleList(
            ResBlock3d(2 * widths[i], widths[i], time_width, rng, dtype=dtype)
            for i in reversed(range(depth)))
        self.up_attn = ModuleList(
            CrossAttention3d(widths[i], cfg.cond_embed_dim, cfg.num_heads, rng,
                             dtype=dtype)
            for i in reversed(self._attn_levels))
        self.ups = ModuleList(
            Conv3d(widths[i], widths[i - 1], 3, rng, padding=1, dtype=dtype)
            for i in reversed(range(1, depth)))

        if cfg.inner_enabled:
            self.inner_res = ModuleList(
                ResBlock3d(width, width, time_width, rng, kernel_size=1,
                           cell_local=True, dtype=dtype)
                for _ in range(cfg.inner_blocks))
            if cfg.inner_attention_enabled:
                self.inner_attn = SpatialTransformer(
                    cfg.latent_side ** 3, width, cfg.num_heads, rng, dtype=dtype)

        out_width = width
        if cfg.inner_enabled and cfg.inout_concat_enabled:
            out_width += width
        self.out_norm = GroupNorm(_norm_groups(out_width), out_width, dtype=dtype)
        self.out_conv = Conv3d(out_width, cfg.in_channels, 3, rng, padding=1,
                               dtype=dtype, zero_init=True)

    # -- pieces ---------------------------------------------------------

    def time_features(self, t, batch: int) -> Tensor:
        emb = timestep_embedding(t, self.config.time_embed_dim)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (batch, emb.shape[0]))
        elif emb.shape[0] != batch:
            raise ValueError(
                f"got {emb.shape[0]} timesteps for a batch of {batch}")
        emb = Tensor(np.ascontiguousarray(emb, dtype=self._dtype))
        return self.time_out(silu(self.time_in(emb)))

    def inner_path(self, stem_feats: Tensor, time_feats: Tensor) -> Tensor:
        """Full-resolution pathway: per-cell residual blocks, then (optionally)
        one spatial-attention block mixing all cells."""
        if not self.config.inner_enabled:
            raise ValueError("inner pathway is disabled in this config")
        y = stem_feats
        for block in self.inner_res:
            y = block(y, time_feats)
        if self.config.inner_attention_enabled:
            y = self.inner_attn(y)
        return y

    # -- forward ----------------------------------------------------------

    def forward(self, z_t, t, cond) -> Tensor:
        cfg = self.config
        z = _as_tensor(z_t, self._dtype)
        if z.ndim != 5:
            raise ValueError(
                f"latent grid must be (batch, side, side, side, channels), got shape {z.shape}")
        b, sx, sy, sz, c = z.shape
        side = cfg.latent_side
        if (sx, sy, sz) != (side, side, side) or c != cfg.in_channels:
            raise ValueError(
                f"latent grid shape {z.shape[1:]} does not match config "
                f"(side {side}, channels {cfg.in_channels})")
        cond_t = _as_tensor(cond, self._dtype)
        if cond_t.ndim == 2:
            cond_t = cond_t.reshape(1, *cond_t.shape)
        if cond_t.ndim != 3 or cond_t.shape[-1] != cfg.cond_embed_dim:
            raise ValueError(
                f"conditioning tokens must be (batch, length, {cfg.cond_embed_dim}), "
                f"got shape {cond_t.shape}")

        tf = self.time_features(t, b)

        x = self.stem(z)
        stem_feats = x
        skips = []
        attn_i = 0
        for level in range(cfg.depth):
            x = self.down_res[level](x, tf)
            if level in self._attn_levels:
                x = self.down_attn[attn_i](x, cond_t)
                attn_i += 1
            skips.append(x)
            if level < cfg.depth - 1:
                x = self.downs[level](x)

        x = self.mid_res1(x, tf)
        x = self.mid_attn(x, cond_t)
        x = self.mid_res2(x, tf)

        attn_i = 0
        up_i = 0
        for level in reversed(range(cfg.depth)):
            x = concat([x, skips[level]], axis=-1)
            x = self.up_res[cfg.depth - 1 - level](x, tf)
            if level in self._attn_levels:
                x = self.up_attn[attn_i](x, cond_t)
                attn_i += 1
            if level > 0:
                x = upsample_nearest3(x, 2)
                x = self.ups[up_i](x)
                up_i += 1

        feats = x
        if cfg.inner_enabled:
            inner = self.inner_path(stem_feats, tf)
            if cfg.inout_concat_enabled:
                feats = concat([feats, inner], axis=-1)
        return self.out_conv(silu(self.out_norm(feats)))


def count_params(config: UinUNetConfig) -> int:
    """Total trainable parameter count for a network built from ``config``."""
    rng = np.random.default_rng(0)
    return UinUNet(config, rng).num_params()
