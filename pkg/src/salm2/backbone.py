"""Bottom-up image branch: conv stem, SCPM encoder stages, shared skip attention, decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .ssm import MambaBlock

NORM_GROUPS = 4


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(NORM_GROUPS, channels), channels)


def default_branch_widths(out_channels: int) -> tuple[int, int, int, int]:
    """Split ``C'`` as (C'/2, C'/4, C'/8, C'/8), remainder on the widest branch."""
    w = [out_channels // 2, out_channels // 4, out_channels // 8, out_channels // 8]
    if min(w) < 1:
        raise ConfigError(f"SCPM output width {out_channels} too small for four branches")
    w[0] += out_channels - sum(w)
    return tuple(w)


@dataclass
class ScpmConfig:
    in_channels: int
    branch_out_channels: tuple[int, ...]
    downsample: bool = True
    out_channels: int | None = None
    skip_scale_init: float = 1.0
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4

    def __post_init__(self):
        self.branch_out_channels = tuple(int(c) for c in self.branch_out_channels)
        if len(self.branch_out_channels) != 4:
            raise ConfigError(f"SCPM needs exactly 4 branches, got {len(self.branch_out_channels)}")
        if any(c < 1 for c in self.branch_out_channels):
            raise ConfigError(f"branch widths must be positive: {self.branch_out_channels}")
        total = sum(self.branch_out_channels)
        if self.out_channels is None:
            self.out_channels = total
        elif total != self.out_channels:
            raise ConfigError(
                f"branch widths {self.branch_out_channels} sum to {total}, expected {self.out_channels}"
            )


class ConvStemStage(nn.Module):
    """3x3 stride-2 conv, group norm, SiLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
        self.norm = _norm(out_channels)

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise ContractError(f"stem stage expects {self.conv.in_channels} channels, got {x.shape[1]}")
        return F.silu(self.norm(self.conv(x)))


def conv_stem_stage(x, stage_params: ConvStemStage):
    return stage_params(x)


class ScpmBranch(nn.Module):
    """One parallel branch: ``conv(X) + alpha * mamba(conv(X))``."""

    def __init__(self, in_channels, out_channels, stride, skip_scale_init, d_state, expand, d_conv):
        super().__init__()
        self.embed = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.mamba = MambaBlock(out_channels, d_state=d_state, expand=expand, d_conv=d_conv)
        self.alpha = nn.Parameter(torch.tensor(float(skip_scale_init)))

    def forward(self, x):
        e = self.embed(x)
        B, C, H, W = e.shape
        seq = e.flatten(2).transpose(1, 2)          # row-major: [B, H*W, C]
        m = self.mamba(seq).transpose(1, 2).reshape(B, C, H, W)
        return e + self.alpha * m


class ScpmLayer(nn.Module):
    """Four parallel embedding+Mamba branches over the full input, concatenated on channels."""

    def __init__(self, cfg: ScpmConfig):
        super().__init__()
        self.cfg = cfg
        stride = 2 if cfg.downsample else 1
        self.branches = nn.ModuleList(
            ScpmBranch(cfg.in_channels, c, stride, cfg.skip_scale_init, cfg.d_state, cfg.expand, cfg.d_conv)
            for c in cfg.branch_out_channels
        )

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"SCPM layer expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        return torch.cat([b(x) for b in self.branches], dim=1)


def scpm_layer(x, layer: ScpmLayer):
    return layer(x)


class ScpmStage(nn.Module):
    """SCPM layer followed by group norm and SiLU."""

    def __init__(self, cfg: ScpmConfig):
        super().__init__()
        self.scpm = ScpmLayer(cfg)
        self.norm = _norm(cfg.out_channels)

    def forward(self, x):
        return F.silu(self.norm(self.scpm(x)))


class SkipAttention(nn.Module):
    """Spatial x channel gating with channel-count independent weights.

    The spatial gate convolves the [channel-mean, channel-max] map with a 7x7
    kernel; the channel gate runs a length-3 1-D conv along the pooled
    channel descriptor. Neither kernel depends on C, so one instance serves
    every skip level.
    """

    def __init__(self, spatial_kernel: int = 7, channel_kernel: int = 3):
        super().__init__()
        self.spatial = nn.Conv2d(2, 1, spatial_kernel, padding=spatial_kernel // 2, bias=False)
        self.channel = nn.Conv1d(1, 1, channel_kernel, padding=channel_kernel // 2, bias=False)

    def gates(self, enc):
        pooled = torch.cat([enc.mean(1, keepdim=True), enc.amax(1, keepdim=True)], dim=1)
        spatial_gate = torch.sigmoid(self.spatial(pooled))                   # [B, 1, H, W]
        desc = enc.mean((2, 3)).unsqueeze(1)                                 # [B, 1, C]
        channel_gate = torch.sigmoid(self.channel(desc)).transpose(1, 2)     # [B, C, 1]
        return spatial_gate, channel_gate.unsqueeze(-1)

    def forward(self, enc):
        spatial_gate, channel_gate = self.gates(enc)
        return enc * spatial_gate * channel_gate


def skip_attention(enc, params: SkipAttention):
    return params(enc)


class SepConv(nn.Module):
    """Depthwise 3x3 then pointwise, group norm, SiLU."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(in_channels, in_channels, 3, padding=1, groups=in_channels)
        self.pointwise = nn.Conv2d(in_channels, out_channels, 1)
        self.norm = _norm(out_channels)

    def forward(self, x):
        return F.silu(self.norm(self.pointwise(self.depthwise(x))))


class Decoder(nn.Module):
    """Mirror of the encoder.

    Per level, deep to shallow: conv to the skip's width, 2x bilinear
    upsample when the skip is larger, add the gated skip. A 1x1 conv and a
    last 2x upsample give a one-channel logit map at input resolution.
    """

    def __init__(self, deepest_channels: int, skip_channels: list[int], skip_attention: SkipAttention,
                 final_upsample: int = 2):
        super().__init__()
        self.skip_channels = list(skip_channels)
        self.attention = skip_attention
        widths = [deepest_channels] + self.skip_channels[::-1]
        self.blocks = nn.ModuleList(SepConv(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.final_upsample = final_upsample
        self.head = nn.Conv2d(self.skip_channels[0], 1, 1)

    def forward(self, deepest, skips):
        if len(skips) != len(self.blocks):
            raise ContractError(f"decoder expects {len(self.blocks)} skips, got {len(skips)}")
        x = deepest
        for block, skip in zip(self.blocks, reversed(skips)):
            x = block(x)
            if x.shape[-2:] != skip.shape[-2:]:
                if (2 * x.shape[-2], 2 * x.shape[-1]) != tuple(skip.shape[-2:]):
                    raise ContractError(
                        f"skip of size {tuple(skip.shape[-2:])} does not mirror decoder size {tuple(x.shape[-2:])}"
                    )
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = x + self.attention(skip)
        # 1x1 head before the last upsample: both are linear and the bilinear
        # weights sum to one, so the order only changes the cost.
        x = self.head(x)
        if self.final_upsample > 1:
            x = F.interpolate(x, scale_factor=self.final_upsample, mode="bilinear", align_corners=False)
        return x


def decode(deepest, skips, decoder: Decoder):
    return decoder(deepest, skips)


@dataclass
class BackboneConfig:
    stem_channels: tuple[int, ...] = (8, 16, 24)
    scpm_channels: tuple[int, ...] = (32, 48, 64)
    scpm_downsample: tuple[bool, ...] = (True, True, False)
    in_channels: int = 3
    d_state: int = 8
    expand: int = 2
    d_conv: int = 4
    skip_scale_init: float = 1.0
    branch_widths: tuple[tuple[int, ...], ...] | None = field(default=None)

    def scpm_configs(self) -> list[ScpmConfig]:
        cfgs = []
        prev = self.stem_channels[-1]
        widths = self.branch_widths or [default_branch_widths(c) for c in self.scpm_channels]
        for c, down, w in zip(self.scpm_channels, self.scpm_downsample, widths):
            cfgs.append(ScpmConfig(prev, tuple(w), down, c, self.skip_scale_init,
                                   self.d_state, self.expand, self.d_conv))
            prev = c
        return cfgs

    @property
    def n_downsamples(self) -> int:
        return len(self.stem_channels) + sum(bool(d) for d in self.scpm_downsample)


class Backbone(nn.Module):
    """Encoder + decoder. ``encode`` returns (deepest, skips shallow->deep)."""

    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        if len(cfg.scpm_channels) != len(cfg.scpm_downsample):
            raise ConfigError("scpm_channels and scpm_downsample lengths differ")
        chans = [cfg.in_channels, *cfg.stem_channels]
        self.stem = nn.ModuleList(ConvStemStage(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.stages = nn.ModuleList(ScpmStage(c) for c in cfg.scpm_configs())
        skip_channels = [*cfg.stem_channels, *cfg.scpm_channels[:-1]]
        self.decoder = Decoder(cfg.scpm_channels[-1], skip_channels, SkipAttention())

    @property
    def skip_attention(self) -> SkipAttention:
        return self.decoder.attention

    @property
    def deepest_channels(self) -> int:
        return self.cfg.scpm_channels[-1]

    def encode(self, x):
        skips = []
        for stage in self.stem:
            x = stage(x)
            skips.append(x)
        for stage in self.stages:
            x = stage(x)
            skips.append(x)
        return x, skips[:-1]

    def decode(self, deepest, skips):
        return self.decoder(deepest, skips)

    def forward(self, x):
        deepest, skips = self.encode(x)
        return self.decode(deepest, skips)
