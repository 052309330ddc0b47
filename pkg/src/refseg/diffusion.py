"""Forward noising, the noise-prediction UNet, and crossmodal mask refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DiffusionConfig
from .errors import ConfigError

UNET_LEVELS = 4  # decoder levels 0 (finest) .. 3 (bottleneck)


@dataclass
class NoiseSchedule:
    """Per-step noise weights and their cumulative products."""

    timesteps: int
    betas: np.ndarray  # (T,) float64
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient at 1-indexed step ``t``."""
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"t={t} outside [1, {self.timesteps}]")
        return float(self.alpha_bars[t - 1])


def build_schedule(
    timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear beta schedule with precomputed alpha tables."""
    if timesteps < 1:
        raise ConfigError("timesteps must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(
            f"beta range ({beta_start}, {beta_end}) must satisfy "
            "0 < beta_start <= beta_end < 1"
        )
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(
        timesteps=timesteps,
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
    )


def forward_noise(
    x0: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Single-shot forward diffusion: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps."""
    alpha_bar = schedule.alpha_bar(t)
    if noise is None:
        noise = torch.randn(
            x0.shape, generator=generator, dtype=x0.dtype, device=x0.device
        )
    elif noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 {tuple(x0.shape)}")
    return float(np.sqrt(alpha_bar)) * x0 + float(np.sqrt(1.0 - alpha_bar)) * noise


def predict_x0(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    """Single-step clean-signal estimate inverting the forward formula."""
    alpha_bar = schedule.alpha_bar(t)
    return (x_t - float(np.sqrt(1.0 - alpha_bar)) * eps_hat) / float(np.sqrt(alpha_bar))


class _TimedBlock(nn.Module):
    """Two 3x3 convolutions with an additive per-channel timestep shift."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)

    def forward(self, x: torch.Tensor, time_emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv1(x)) + self.time_proj(time_emb)[:, :, None, None]
        return self.conv2(F.relu(h))


class NoiseUNet(nn.Module):
    """Small encoder-decoder noise predictor with full-resolution skips.

    Two fine levels (full and half resolution) let the head reproduce
    per-pixel noise; the four deeper decoder levels mirror the stage-1
    decoded-stack geometry, level ``n`` sitting at image_size / 4 / 2^n with
    channel width base_channels * 2^n.
    """

    def __init__(self, timesteps: int, base_channels: int = 32, time_dim: int = 64):
        super().__init__()
        self.timesteps = timesteps
        self.base_channels = base_channels
        widths = [base_channels * 2**n for n in range(UNET_LEVELS)]
        self.level_channels = dict(enumerate(widths))
        fine1 = max(base_channels // 2, 8)  # full resolution
        fine2 = max(base_channels, 8)  # half resolution
        self.time_embedding = nn.Embedding(timesteps + 1, time_dim)

        self.stem = nn.Conv2d(3, fine1, 3, padding=1)
        self.enc_fine1 = _TimedBlock(fine1, fine1, time_dim)
        self.enc_fine2 = _TimedBlock(fine1, fine2, time_dim, stride=2)
        self.enc0 = _TimedBlock(fine2, widths[0], time_dim, stride=2)
        self.down = nn.ModuleList(
            _TimedBlock(widths[n - 1], widths[n], time_dim, stride=2)
            for n in range(1, UNET_LEVELS)
        )
        self.mid = _TimedBlock(widths[-1], widths[-1], time_dim)
        self.up = nn.ModuleList(
            _TimedBlock(widths[n + 1] + widths[n], widths[n], time_dim)
            for n in range(UNET_LEVELS - 2, -1, -1)
        )
        self.up_fine2 = _TimedBlock(widths[0] + fine2, fine2, time_dim)
        self.up_fine1 = _TimedBlock(fine2 + fine1, fine1, time_dim)
        self.head = nn.Conv2d(fine1, 3, 3, padding=1)

    def forward(
        self, x_t: torch.Tensor, t: int | torch.Tensor, return_features: bool = False
    ):
        """Predict the injected noise; optionally return decoder activations.

        Features are keyed by level index: 0 finest .. 3 bottleneck.
        """
        if isinstance(t, int):
            t = torch.full((x_t.shape[0],), t, dtype=torch.long, device=x_t.device)
        time_emb = self.time_embedding(t)

        skip_fine1 = self.enc_fine1(self.stem(x_t), time_emb)
        skip_fine2 = self.enc_fine2(skip_fine1, time_emb)
        skips = [self.enc0(skip_fine2, time_emb)]
        for block in self.down:
            skips.append(block(skips[-1], time_emb))
        features = {UNET_LEVELS - 1: self.mid(skips[-1], time_emb)}
        current = features[UNET_LEVELS - 1]
        for k, block in enumerate(self.up):
            level = UNET_LEVELS - 2 - k
            upsampled = F.interpolate(
                current, scale_factor=2, mode="bilinear", align_corners=False
            )
            current = block(torch.cat([upsampled, skips[level]], dim=1), time_emb)
            features[level] = current
        current = F.interpolate(
            current, scale_factor=2, mode="bilinear", align_corners=False
        )
        current = self.up_fine2(torch.cat([current, skip_fine2], dim=1), time_emb)
        current = F.interpolate(
            current, scale_factor=2, mode="bilinear", align_corners=False
        )
        current = self.up_fine1(torch.cat([current, skip_fine1], dim=1), time_emb)
        eps_hat = self.head(current)
        if return_features:
            return eps_hat, features
        return eps_hat


class CrossmodalFusion(nn.Module):
    """Fuse per-level denoiser activations with the stage-1 decoded stack.

    At each selected level the clean-signal analog is estimated from a
    resized projection of the noised image and the level's activation, the
    stack features are added (channel-projected where widths differ), and
    the fused maps are resized to the base resolution and concatenated.
    """

    def __init__(
        self,
        selection: tuple[int, ...],
        unet_channels: dict[int, int],
        stack_channels: list[int],
    ):
        super().__init__()
        if not selection:
            raise ConfigError("level selection must be nonempty")
        if any(n not in unet_channels for n in selection):
            raise ConfigError(f"selection {selection} outside denoiser levels")
        if any(n >= len(stack_channels) for n in selection):
            raise ConfigError(f"selection {selection} outside decoded-stack levels")
        self.selection = tuple(sorted(selection))
        self.out_channels = sum(unet_channels[n] for n in self.selection)
        self.image_proj = nn.ModuleDict(
            {str(n): nn.Conv2d(3, unet_channels[n], 1) for n in self.selection}
        )
        self.stack_proj = nn.ModuleDict(
            {
                str(n): (
                    nn.Conv2d(stack_channels[n], unet_channels[n], 1)
                    if stack_channels[n] != unet_channels[n]
                    else nn.Identity()
                )
                for n in self.selection
            }
        )

    def forward(
        self,
        x_t: torch.Tensor,
        features: dict[int, torch.Tensor],
        stack: list[torch.Tensor],
        alpha_bar_t: float,
        out_size: tuple[int, int],
    ) -> torch.Tensor:
        signal = float(np.sqrt(alpha_bar_t))
        noise_scale = float(np.sqrt(1.0 - alpha_bar_t))
        fused_levels = []
        for n in self.selection:
            activation = features[n]
            if activation.shape[-2:] != stack[n].shape[-2:]:
                raise ValueError(
                    f"level {n}: denoiser {tuple(activation.shape[-2:])} vs "
                    f"stack {tuple(stack[n].shape[-2:])}"
                )
            x_level = self.image_proj[str(n)](
                F.interpolate(
                    x_t,
                    size=activation.shape[-2:],
                    mode="bilinear",
                    align_corners=False,
                )
            )
            x0_level = (x_level - noise_scale * activation) / signal
            fused = x0_level + self.stack_proj[str(n)](stack[n])
            fused_levels.append(
                F.interpolate(
                    fused, size=out_size, mode="bilinear", align_corners=False
                )
            )
        return torch.cat(fused_levels, dim=1)


class RefinementHead(nn.Module):
    """Residual probability refinement: linear map, ReLU, batch norm.

    The batch-norm affine parameters are zero-initialized so the head starts
    as an exact identity on the stage-1 probability map.
    """

    def __init__(self, in_channels: int, clamp_probability: bool = True):
        super().__init__()
        self.fc = nn.Conv2d(in_channels, 1, 1)
        self.bn = nn.BatchNorm2d(1)
        nn.init.zeros_(self.bn.weight)
        nn.init.zeros_(self.bn.bias)
        self.clamp_probability = clamp_probability

    def forward(
        self, fused: torch.Tensor, p_intermediate: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (refined probability (B, H, W), full-resolution residual)."""
        delta = self.bn(F.relu(self.fc(fused)))
        delta = F.interpolate(
            delta,
            size=p_intermediate.shape[-2:],
            mode="bilinear",
            align_corners=False,
        )[:, 0]
        refined = p_intermediate + delta
        if self.clamp_probability:
            refined = refined.clamp(0.0, 1.0)
        return refined, delta


def mean_absolute_error(prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if prediction.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(prediction.shape)} vs {tuple(target.shape)}"
        )
    return (prediction - target.to(prediction.dtype)).abs().mean()
