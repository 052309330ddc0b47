"""Top-down decoding of the fused pyramid into a full-resolution probability map."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


class TopDownDecoder(nn.Module):
    """Merge fused pyramid features coarse-to-fine.

    The coarsest stack entry is the top fused map itself; every finer entry
    is a 3x3 convolution of the bilinearly upsampled coarser entry
    concatenated with that block's fused features. The returned list is
    re-indexed 0 (finest) .. M-1 (coarsest).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_blocks = config.num_blocks
        c_dec = config.decoder_channels
        channels = [config.block_channels(i) for i in range(1, config.num_blocks + 1)]
        merges = []
        for j in range(config.num_blocks - 2, -1, -1):
            above = channels[-1] if j == config.num_blocks - 2 else c_dec
            merges.append(nn.Conv2d(above + channels[j], c_dec, 3, padding=1))
        # merges[k] refines stack index (num_blocks - 2 - k)
        self.merges = nn.ModuleList(merges)

    def forward(self, fused: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(fused) != self.num_blocks:
            raise ValueError(
                f"expected {self.num_blocks} pyramid levels, got {len(fused)}"
            )
        stack: list[torch.Tensor | None] = [None] * self.num_blocks
        stack[-1] = fused[-1]
        for k, j in enumerate(range(self.num_blocks - 2, -1, -1)):
            upsampled = F.interpolate(
                stack[j + 1],
                size=fused[j].shape[-2:],
                mode="bilinear",
                align_corners=False,
            )
            stack[j] = self.merges[k](torch.cat([upsampled, fused[j]], dim=1))
        return stack


class MaskHead(nn.Module):
    """Two-class 1x1 head over the finest decoded features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        in_channels = (
            config.decoder_channels
            if config.num_blocks > 1
            else config.block_channels(config.num_blocks)
        )
        self.conv = nn.Conv2d(in_channels, 2, 1)

    def forward(
        self, finest: torch.Tensor, out_size: tuple[int, int]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (foreground probability (B, H, W), full-res logits (B, 2, H, W)).

        Logits are upsampled to full resolution before the softmax; training
        uses the logits directly so gradients survive saturation.
        """
        logits = self.conv(finest)
        upsampled = F.interpolate(
            logits, size=out_size, mode="bilinear", align_corners=False
        )
        probs = torch.softmax(upsampled, dim=1)
        return probs[:, 1], upsampled


def binarize(probability: torch.Tensor) -> torch.Tensor:
    """Strict threshold: pixel is foreground iff p > 0.5."""
    return probability > 0.5


def cross_entropy_loss(
    p_foreground: torch.Tensor, target: torch.Tensor, eps: float = 1e-7
) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy with probability clamping."""
    if p_foreground.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(p_foreground.shape)} vs {tuple(target.shape)}"
        )
    p = p_foreground.clamp(eps, 1.0 - eps)
    target = target.to(p.dtype)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
