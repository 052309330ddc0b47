"""Hierarchical crossmodal encoder: parallel stem, per-block attention, gating."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ConfigError
from .pwam import LanguageGate, PixelWordAttention


def group_norm(channels: int) -> nn.GroupNorm:
    """GroupNorm with a group count that always divides the channel count."""
    return nn.GroupNorm(math.gcd(8, channels), channels)


@dataclass
class FeaturePyramid:
    """Per-block encoder outputs; index 0 is block 1 (finest)."""

    visual: list[torch.Tensor]  # V_i
    fused: list[torch.Tensor]  # F_i (attention output)
    gated: list[torch.Tensor]  # E_i (gated residual)
    gates: list[torch.Tensor]  # S_i (gate maps)


class LocalBackbone(nn.Module):
    """Stride-4 conv stem standing in for a hierarchical window-attention encoder."""

    def __init__(self, c1: int):
        super().__init__()
        mid = max(c1 // 2, 8)
        self.net = nn.Sequential(
            nn.Conv2d(3, mid, 3, stride=2, padding=1),
            group_norm(mid),
            nn.ReLU(),
            nn.Conv2d(mid, c1, 3, stride=2, padding=1),
            group_norm(c1),
            nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class GlobalBranch(nn.Module):
    """Small conv encoder pooled to a fixed-dimension global image embedding."""

    def __init__(self, c_clp: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            group_norm(16),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            group_norm(32),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            group_norm(64),
            nn.ReLU(),
            nn.Conv2d(64, c_clp, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(2, 3))  # (B, c_clp)


class ParallelStem(nn.Module):
    """Block 1: local and global image encodings fused in the channel direction.

    The global vector is reshaped to a square map of width sqrt(c_clp / c1),
    bilinearly upsampled to the local grid, concatenated on channels, and
    merged by a 3x3 convolution. With the global branch disabled the merge
    convolution consumes the local features alone.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.c1 = config.c1
        self.c_clp = config.c_clp
        self.use_global = config.use_global_branch
        self.global_side = int(round((config.c_clp / config.c1) ** 0.5))
        self.local = LocalBackbone(config.c1)
        if self.use_global:
            self.global_branch = GlobalBranch(config.c_clp)
            self.merge = nn.Conv2d(2 * config.c1, config.c1, 3, padding=1)
        else:
            self.global_branch = None
            self.merge = nn.Conv2d(config.c1, config.c1, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        local = self.local(x)
        if not self.use_global:
            return self.merge(local)
        embedding = self.global_branch(x)
        side = self.global_side
        grid = embedding.view(-1, self.c1, side, side)
        grid = F.interpolate(
            grid, size=local.shape[-2:], mode="bilinear", align_corners=False
        )
        return self.merge(torch.cat([local, grid], dim=1))


class _DownBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = group_norm(c_out)
        self.conv = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.relu(self.norm(self.down(x))))


class MultimodalEncoder(nn.Module):
    """M-block pyramid: halving spatial size, doubling channels per block.

    Each block's visual features attend to the instruction tokens; the gated
    combination of attention output and visual stream feeds the next block.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.stem = ParallelStem(config)
        channels = [config.block_channels(i) for i in range(1, config.num_blocks + 1)]
        self.blocks = nn.ModuleList(
            _DownBlock(channels[i - 1], channels[i]) for i in range(1, len(channels))
        )
        self.attention = nn.ModuleList(
            PixelWordAttention(c, config.text_dim) for c in channels
        )
        self.gates = nn.ModuleList(LanguageGate(c) for c in channels)

    def forward(
        self, images: torch.Tensor, text: torch.Tensor, pad_mask: torch.Tensor
    ) -> FeaturePyramid:
        if images.shape[-1] != self.config.image_size:
            raise ConfigError(
                f"image size {images.shape[-1]} != configured {self.config.image_size}"
            )
        visual, fused, gated, gates = [], [], [], []
        current = self.stem(images)
        for i in range(self.config.num_blocks):
            if i > 0:
                current = self.blocks[i - 1](gated[i - 1])
            attended = self.attention[i](current, text, pad_mask)
            gated_i, gate_i = self.gates[i](attended, current)
            visual.append(current)
            fused.append(attended)
            gated.append(gated_i)
            gates.append(gate_i)
        return FeaturePyramid(visual=visual, fused=fused, gated=gated, gates=gates)
