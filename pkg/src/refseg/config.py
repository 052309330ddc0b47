"""Dataclass configs for generation, model geometry, diffusion, and training."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class GenerationConfig:
    """Per-scene generation parameters."""

    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    # reject renders whose visible target is smaller than this many pixels
    min_target_pixels: int = 8
    max_attempts: int = 64

    def validate(self) -> None:
        if not 2 <= self.min_objects <= self.max_objects <= 6:
            raise ConfigError(
                f"object count range [{self.min_objects}, {self.max_objects}] "
                "must lie within [2, 6]"
            )
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.min_target_pixels < 1:
            raise ConfigError("min_target_pixels must be >= 1")


@dataclass
class DatasetConfig:
    """Split sizes and seeding for a generated dataset."""

    train: int = 800
    val: int = 100
    test: int = 100
    seed: int = 0
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    @property
    def total(self) -> int:
        return self.train + self.val + self.test

    def validate(self) -> None:
        if min(self.train, self.val, self.test) <= 0:
            raise ConfigError("all split sizes must be positive")
        self.generation.validate()


@dataclass
class ModelConfig:
    """Geometry of the stage-1 crossmodal encoder/decoder."""

    image_size: int = 64
    c1: int = 32  # channels of the first block; doubled per block
    num_blocks: int = 4
    c_clp: int = 512  # global image embedding dimension
    use_global_branch: bool = True
    c_dec: int | None = None  # decoder width; defaults to c1
    text_dim: int = 64
    text_layers: int = 2
    text_heads: int = 4
    max_tokens: int = 20

    @property
    def decoder_channels(self) -> int:
        return self.c1 if self.c_dec is None else self.c_dec

    @property
    def base_resolution(self) -> int:
        """Spatial size of block 1 (stride-4 stem)."""
        return self.image_size // 4

    def block_channels(self, i: int) -> int:
        """Channel count of block ``i`` (1-based)."""
        return self.c1 * 2 ** (i - 1)

    def validate(self) -> None:
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.image_size % (4 * 2 ** (self.num_blocks - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} does not support "
                f"{self.num_blocks} halving blocks after the stride-4 stem"
            )
        ratio = self.c_clp / self.c1
        side = math.isqrt(int(round(ratio)))
        if side * side * self.c1 != self.c_clp:
            raise ConfigError(
                f"sqrt(c_clp / c1) = sqrt({self.c_clp}/{self.c1}) is not integral"
            )
        if self.text_dim % self.text_heads != 0:
            raise ConfigError("text_dim must be divisible by text_heads")


@dataclass
class DiffusionConfig:
    """Noise schedule and stage-2 fusion settings."""

    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_infer: int | None = None  # defaults to timesteps // 2
    level_selection: tuple[int, ...] = (0, 1, 2)
    clamp_probability: bool = True
    time_dim: int = 64

    @property
    def inference_step(self) -> int:
        return self.timesteps // 2 if self.t_infer is None else self.t_infer

    def validate(self) -> None:
        if self.timesteps < 1:
            raise ConfigError("timesteps must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(
                f"beta range ({self.beta_start}, {self.beta_end}) must satisfy "
                "0 < beta_start <= beta_end < 1"
            )
        if not self.level_selection:
            raise ConfigError("level_selection must be nonempty")
        if any(n not in (0, 1, 2, 3) for n in self.level_selection):
            raise ConfigError("level_selection entries must be in {0, 1, 2, 3}")
        if not 1 <= self.inference_step <= self.timesteps:
            raise ConfigError("t_infer out of range")


@dataclass
class Stage1Config:
    """Intermediate-step optimizer settings (decoupled weight decay)."""

    epochs: int = 11
    batch_size: int = 16
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class DenoiserConfig:
    """Noise-prediction UNet training settings."""

    epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0


@dataclass
class Stage2Config:
    """Refinement-step optimizer and early-stopping settings."""

    epochs: int = 5
    batch_size: int = 1
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    patience: int = 50
    warmup_epochs: int = 3
    seed: int = 0
    eval_noise_seed: int = 0


@dataclass
class RunConfig:
    """Everything a training run needs; serialized alongside every checkpoint."""

    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def validate(self) -> None:
        self.model.validate()
        self.diffusion.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        def build(klass, payload):
            fields = {f.name: f for f in dataclasses.fields(klass)}
            kwargs = {}
            for key, value in payload.items():
                if key not in fields:
                    raise ConfigError(f"unknown config key {key!r} for {klass.__name__}")
                if isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
            return klass(**kwargs)

        return cls(
            model=build(ModelConfig, data.get("model", {})),
            diffusion=build(DiffusionConfig, data.get("diffusion", {})),
            stage1=build(Stage1Config, data.get("stage1", {})),
            denoiser=build(DenoiserConfig, data.get("denoiser", {})),
            stage2=build(Stage2Config, data.get("stage2", {})),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
