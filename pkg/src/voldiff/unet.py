"""3D UNet noise-prediction backbone.

The network is partitioned into input layer, encoder, middle block,
decoder, and output layer so a control adapter can clone the input
layer + encoder and graft onto the frozen remainder. Residual blocks
use two 3x3x3 convolutions with group normalization and SiLU; the
sinusoidal timestep embedding is projected per block and added as a
channel bias. Downsampling is a strided conv (x2 per level), upsampling
nearest-neighbor + conv, with encoder->decoder skip concatenation. The
output conv is zero-initialized, so a freshly built network predicts
exactly zero noise.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ParameterError, ShapeError


@dataclass
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    channel_mult: list[int] = field(default_factory=lambda: [1, 2, 4])
    blocks_per_level: int = 1
    time_embed_dim: int = 128
    in_channels: int = 1  # 2 for the channel-concatenated conditional variant
    patch_edge: int = 32

    def validate(self) -> None:
        counts = (
            self.levels,
            self.base_channels,
            self.blocks_per_level,
            self.time_embed_dim,
            self.in_channels,
            self.patch_edge,
        )
        if any(int(c) < 1 for c in counts):
            raise ParameterError(f"all config counts must be positive: {self}")
        if len(self.channel_mult) != self.levels:
            raise ParameterError(
                f"channel_mult has {len(self.channel_mult)} entries for {self.levels} levels"
            )
        if any(int(m) < 1 for m in self.channel_mult):
            raise ParameterError("channel multipliers must be positive")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")
        factor = self.downsample_factor
        if self.patch_edge % factor:
            raise ParameterError(
                f"patch_edge {self.patch_edge} not divisible by downsampling factor {factor}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "channel_mult": list(self.channel_mult),
            "blocks_per_level": self.blocks_per_level,
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "patch_edge": self.patch_edge,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features of the timestep, interleaved [sin, cos, ...].

    Frequencies fall geometrically from 1 to 1e-4, so embeddings are
    pairwise distinct for all timesteps of a T=1000 schedule.
    """
    if dim % 2:
        raise ParameterError("embedding dim must be even")
    if not torch.is_tensor(t):
        t = torch.tensor([float(t)])
    t = t.float().reshape(-1)
    half = dim // 2
    if half > 1:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half) / (half - 1))
    else:
        freqs = torch.ones(1)
    args = t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1)
    return emb.reshape(t.shape[0], dim)


def _group_count(channels: int) -> int:
    groups = 8
    while channels % groups:
        groups //= 2
    return max(groups, 1)


class ResBlock3d(nn.Module):
    """Two-conv residual block with additive timestep bias."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_group_count(c_in), c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, c_out)
        self.norm2 = nn.GroupNorm(_group_count(c_out), c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.temb_proj(torch.nn.functional.silu(temb))[:, :, None, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class Encoder3d(nn.Module):
    """Per-level residual blocks with strided-conv downsampling between levels.

    forward returns the bottom feature map plus the per-level skip
    features captured just before each downsample.
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        chans = config.level_channels
        self.levels = config.levels
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level, c in enumerate(chans):
            level_blocks = nn.ModuleList(
                ResBlock3d(c, c, config.time_embed_dim) for _ in range(config.blocks_per_level)
            )
            self.blocks.append(level_blocks)
            if level < config.levels - 1:
                self.downs.append(nn.Conv3d(c, chans[level + 1], 3, stride=2, padding=1))

    def forward(self, h: torch.Tensor, temb: torch.Tensor):
        skips = []
        for level in range(self.levels):
            for block in self.blocks[level]:
                h = block(h, temb)
            if level < self.levels - 1:
                skips.append(h)
                h = self.downs[level](h)
        return h, skips


class Decoder3d(nn.Module):
    """Nearest-neighbor upsampling + conv, skip concatenation, residual blocks."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        chans = config.level_channels
        self.levels = config.levels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for level in reversed(range(config.levels - 1)):
            self.ups.append(nn.Conv3d(chans[level + 1], chans[level], 3, padding=1))
            level_blocks = nn.ModuleList()
            for b in range(config.blocks_per_level):
                c_in = 2 * chans[level] if b == 0 else chans[level]
                level_blocks.append(ResBlock3d(c_in, chans[level], config.time_embed_dim))
            self.blocks.append(level_blocks)

    def forward(self, h: torch.Tensor, skips: list[torch.Tensor], temb: torch.Tensor):
        for i, level in enumerate(reversed(range(self.levels - 1))):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = self.ups[i](h)
            h = torch.cat([h, skips[level]], dim=1)
            for block in self.blocks[i]:
                h = block(h, temb)
        return h


class UNet3d(nn.Module):
    """Noise-prediction UNet with an explicit five-part parameter partition."""

    def __init__(self, config: UNetConfig):
        config.validate()
        super().__init__()
        self.config = config
        self.frozen = False
        chans = config.level_channels
        temb = config.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        self.input_layer = nn.Conv3d(config.in_channels, chans[0], 3, padding=1)
        self.encoder = Encoder3d(config)
        self.middle = ResBlock3d(chans[-1], chans[-1], temb)
        self.decoder = Decoder3d(config)
        self.output_layer = nn.Sequential(
            nn.GroupNorm(_group_count(chans[0]), chans[0]),
            nn.SiLU(),
            nn.Conv3d(chans[0], 1, 3, padding=1),
        )

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected (B, {self.config.in_channels}, D, H, W) input, got {tuple(x.shape)}"
            )
        factor = self.config.downsample_factor
        if any(s % factor for s in x.shape[2:]):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by downsampling factor {factor}"
            )

    def embed_time(self, t) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.config.time_embed_dim))

    def encode(self, x: torch.Tensor, temb: torch.Tensor):
        """Input layer + encoder; returns (bottom feature map, level skips)."""
        self._check_input(x)
        return self.encoder(self.input_layer(x), temb)

    def decode(self, bottom: torch.Tensor, skips, temb: torch.Tensor) -> torch.Tensor:
        """Middle block, decoder, and output layer."""
        h = self.middle(bottom, temb)
        h = self.decoder(h, skips, temb)
        return self.output_layer(h)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        temb = self.embed_time(t)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = temb.expand(x.shape[0], -1)
        bottom, skips = self.encode(x, temb)
        return self.decode(bottom, skips, temb)

    def forward_with_features(self, x: torch.Tensor, t):
        """Forward pass that also exposes the bottom feature map and skips."""
        temb = self.embed_time(t)
        if temb.shape[0] == 1 and x.shape[0] > 1:
            temb = temb.expand(x.shape[0], -1)
        bottom, skips = self.encode(x, temb)
        return self.decode(bottom, skips, temb), bottom, skips

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True

    def clone_input_and_encoder(self):
        """Deep copies of the input layer and encoder (trainable)."""
        input_copy = copy.deepcopy(self.input_layer)
        encoder_copy = copy.deepcopy(self.encoder)
        for p in input_copy.parameters():
            p.requires_grad_(True)
        for p in encoder_copy.parameters():
            p.requires_grad_(True)
        return input_copy, encoder_copy


def build_unet(config: UNetConfig, seed: int) -> UNet3d:
    """Construct a UNet with deterministic initialization from the seed."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet3d(config)
    final_conv = net.output_layer[-1]
    with torch.no_grad():
        final_conv.weight.zero_()
        final_conv.bias.zero_()
    return net


def analytic_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count for the architecture above.

    conv3d k^3: cin*cout*k^3 + cout; groupnorm: 2c; linear: cin*cout + cout.
    Documented in the README so construction can be audited.
    """
    config.validate()
    chans = config.level_channels
    temb = config.time_embed_dim

    def conv(cin, cout, k):
        return cin * cout * k**3 + cout

    def res_block(cin, cout):
        n = 2 * cin  # norm1
        n += conv(cin, cout, 3)
        n += temb * cout + cout  # temb projection
        n += 2 * cout  # norm2
        n += conv(cout, cout, 3)
        if cin != cout:
            n += conv(cin, cout, 1)
        return n

    total = 2 * (temb * temb + temb)  # time MLP
    total += conv(config.in_channels, chans[0], 3)  # input layer
    for level, c in enumerate(chans):  # encoder
        total += config.blocks_per_level * res_block(c, c)
        if level < config.levels - 1:
            total += conv(c, chans[level + 1], 3)
    total += res_block(chans[-1], chans[-1])  # middle
    for level in reversed(range(config.levels - 1)):  # decoder
        total += conv(chans[level + 1], chans[level], 3)
        for b in range(config.blocks_per_level):
            cin = 2 * chans[level] if b == 0 else chans[level]
            total += res_block(cin, chans[level])
    total += 2 * chans[0] + conv(chans[0], 1, 3)  # output layer
    return total
