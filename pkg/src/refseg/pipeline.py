"""Model assembly for both stages and single-sample inference."""

from __future__ import annotations

import warnings

import numpy as np
import torch
import torch.nn as nn

from .config import DiffusionConfig, ModelConfig, RunConfig
from .diffusion import (
    CrossmodalFusion,
    NoiseUNet,
    RefinementHead,
    build_schedule,
    forward_noise,
)
from .encoder import MultimodalEncoder
from .head import MaskHead, TopDownDecoder, binarize
from .text import TextEncoder, Vocabulary, tokenize


def stack_channel_list(config: ModelConfig) -> list[int]:
    """Channel widths of the decoded stack, index 0 finest .. M-1 coarsest."""
    channels = [config.decoder_channels] * config.num_blocks
    channels[-1] = config.block_channels(config.num_blocks)
    return channels


class Stage1Model(nn.Module):
    """Text encoder + crossmodal pyramid + top-down mask decoder."""

    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.text = TextEncoder(
            vocab_size,
            dim=config.text_dim,
            layers=config.text_layers,
            heads=config.text_heads,
            max_tokens=config.max_tokens,
        )
        self.encoder = MultimodalEncoder(config)
        self.decoder = TopDownDecoder(config)
        self.head = MaskHead(config)

    def forward(
        self, images: torch.Tensor, token_ids: torch.Tensor, pad_mask: torch.Tensor
    ):
        """Returns (foreground probability (B, H, W), logits, decoded stack, pyramid)."""
        text = self.text(token_ids, pad_mask)
        pyramid = self.encoder(images, text, pad_mask)
        stack = self.decoder(pyramid.fused)
        probability, logits = self.head(stack[0], images.shape[-2:])
        return probability, logits, stack, pyramid


class DiffusionRefiner(nn.Module):
    """Stage 2: frozen noise predictor feeding trainable fusion + residual head."""

    def __init__(
        self, config: DiffusionConfig, model_config: ModelConfig, unet: NoiseUNet
    ):
        super().__init__()
        config.validate()
        self.unet = unet
        self.schedule = build_schedule(
            config.timesteps, config.beta_start, config.beta_end
        )
        self.t_infer = config.inference_step
        self.fusion = CrossmodalFusion(
            config.level_selection, unet.level_channels, stack_channel_list(model_config)
        )
        self.head = RefinementHead(self.fusion.out_channels, config.clamp_probability)

    def trainable_parameters(self):
        """Stage-2 parameters: fusion projections and the refinement head."""
        yield from self.fusion.parameters()
        yield from self.head.parameters()

    def compute_features(
        self,
        images: torch.Tensor,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        """Noise the (rescaled) image and capture frozen denoiser activations."""
        x0 = images * 2.0 - 1.0
        x_t = forward_noise(x0, self.t_infer, self.schedule, noise, generator)
        with torch.no_grad():
            _, features = self.unet(x_t, self.t_infer, return_features=True)
        return x_t, {k: v.detach() for k, v in features.items()}

    def refine(
        self,
        x_t: torch.Tensor,
        features: dict[int, torch.Tensor],
        stack: list[torch.Tensor],
        p_intermediate: torch.Tensor,
    ) -> torch.Tensor:
        fused = self.fusion(
            x_t,
            features,
            stack,
            self.schedule.alpha_bar(self.t_infer),
            out_size=stack[0].shape[-2:],
        )
        refined, _ = self.head(fused, p_intermediate)
        return refined

    def forward(
        self,
        images: torch.Tensor,
        stack: list[torch.Tensor],
        p_intermediate: torch.Tensor,
        noise: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        x_t, features = self.compute_features(images, noise, generator)
        return self.refine(x_t, features, stack, p_intermediate)


def build_stage1(run_config: RunConfig, vocab_size: int) -> Stage1Model:
    return Stage1Model(run_config.model, vocab_size)


def build_unet(run_config: RunConfig) -> NoiseUNet:
    return NoiseUNet(
        timesteps=run_config.diffusion.timesteps,
        base_channels=run_config.model.c1,
        time_dim=run_config.diffusion.time_dim,
    )


def build_refiner(run_config: RunConfig, unet: NoiseUNet) -> DiffusionRefiner:
    return DiffusionRefiner(run_config.diffusion, run_config.model, unet)


def infer(
    stage1: Stage1Model,
    vocab: Vocabulary,
    image: np.ndarray,
    instruction: str,
    refiner: DiffusionRefiner | None = None,
    noise_seed: int = 0,
) -> dict:
    """Single-sample inference; deterministic given the fixed noise seed.

    Instructions longer than the configured token length are truncated with
    a warning rather than rejected.
    """
    config = stage1.config
    if len(instruction.split()) > config.max_tokens:
        warnings.warn(
            f"instruction exceeds {config.max_tokens} tokens and was truncated",
            stacklevel=2,
        )
    tokens = tokenize(instruction, vocab, config.max_tokens)
    images = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    images = images.permute(2, 0, 1)[None]
    token_ids = torch.as_tensor(tokens.ids, dtype=torch.long)[None]
    pad_mask = torch.as_tensor(tokens.pad_mask())[None]

    stage1.eval()
    with torch.no_grad():
        probability, _, stack, _ = stage1(images, token_ids, pad_mask)
    result = {
        "p_intermediate": probability[0].numpy(),
        "mask_intermediate": binarize(probability[0]).numpy(),
    }
    if refiner is not None:
        refiner.eval()
        generator = torch.Generator().manual_seed(noise_seed)
        with torch.no_grad():
            refined = refiner(images, stack, probability, generator=generator)
        result["p_diffusion"] = refined[0].numpy()
        result["mask_diffusion"] = binarize(refined[0]).numpy()
    return result
