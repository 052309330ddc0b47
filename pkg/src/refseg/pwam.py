"""Pixel-word attention and the language gate used between encoder blocks."""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InvalidInputError


class PixelWordAttention(nn.Module):
    """Single-head attention from each pixel to the instruction tokens.

    Spatial dims are flattened so attention is pixels x tokens rather than
    pixels x pixels; all projections are 1x1 convolutions / per-position
    linear maps.
    """

    def __init__(self, visual_dim: int, text_dim: int):
        super().__init__()
        self.visual_dim = visual_dim
        self.query = nn.Conv2d(visual_dim, visual_dim, 1)
        self.key = nn.Conv1d(text_dim, visual_dim, 1)
        self.value = nn.Conv1d(text_dim, visual_dim, 1)
        self.out = nn.Conv2d(visual_dim, visual_dim, 1)
        self.visual_proj = nn.Conv2d(visual_dim, visual_dim, 1)
        self.fuse = nn.Conv2d(visual_dim, visual_dim, 1)

    def attention_weights(
        self, visual: torch.Tensor, text: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """Pixel-to-token softmax weights (B, H*W, l); PAD keys get -inf scores."""
        channels = visual.shape[1]
        queries = self.query(visual).flatten(2).transpose(1, 2)  # (B, N, C)
        keys = self.key(text)  # (B, C, l)
        scores = (queries @ keys) * channels**-0.5  # (B, N, l)
        scores = scores.masked_fill(pad_mask[:, None, :], float("-inf"))
        return torch.softmax(scores, dim=-1)

    def attend(
        self, visual: torch.Tensor, text: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        """Language-attended features, flattened: (B, H*W, C)."""
        weights = self.attention_weights(visual, text, pad_mask)
        values = self.value(text).transpose(1, 2)  # (B, l, C)
        return weights @ values

    def forward(
        self, visual: torch.Tensor, text: torch.Tensor, pad_mask: torch.Tensor
    ) -> torch.Tensor:
        if bool(pad_mask.all(dim=-1).any()):
            raise InvalidInputError(
                "all tokens are padding; the attention softmax is undefined"
            )
        batch, channels, height, width = visual.shape
        attended = self.attend(visual, text, pad_mask)
        grid = attended.transpose(1, 2).reshape(batch, channels, height, width)
        language_map = self.out(grid)
        return self.fuse(self.visual_proj(visual) * language_map)


class LanguageGate(nn.Module):
    """tanh-conv gate compressing fused features back onto the visual stream."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(
        self, fused: torch.Tensor, visual: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (gated, gate_map): gated = fused * tanh(conv(fused)) + visual."""
        if fused.shape != visual.shape:
            raise ValueError(f"shape mismatch: {fused.shape} vs {visual.shape}")
        gate = torch.tanh(self.conv(fused))
        return fused * gate + visual, gate
