"""Checkpoint persistence; a save/load round trip reproduces evaluation exactly."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import RunConfig
from .errors import TrainingError
from .pipeline import (
    DiffusionRefiner,
    Stage1Model,
    build_refiner,
    build_stage1,
    build_unet,
)
from .text import Vocabulary


@dataclass
class Checkpoint:
    run_config: RunConfig
    vocab_tokens: list[str]
    stage1_state: dict | None = None
    denoiser_state: dict | None = None
    fusion_state: dict | None = None
    refine_state: dict | None = None
    counters: dict = field(default_factory=dict)
    best_val: float | None = None

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary.from_tokens(self.vocab_tokens)

    def build_stage1(self) -> Stage1Model:
        if self.stage1_state is None:
            raise TrainingError("checkpoint holds no stage-1 weights")
        model = build_stage1(self.run_config, len(self.vocab_tokens))
        model.load_state_dict(self.stage1_state)
        model.eval()
        return model

    def build_refiner(self) -> DiffusionRefiner:
        if self.denoiser_state is None:
            raise TrainingError("checkpoint holds no denoiser weights")
        if self.fusion_state is None or self.refine_state is None:
            raise TrainingError("checkpoint holds no refinement weights")
        unet = build_unet(self.run_config)
        unet.load_state_dict(self.denoiser_state)
        refiner = build_refiner(self.run_config, unet)
        refiner.fusion.load_state_dict(self.fusion_state)
        refiner.head.load_state_dict(self.refine_state)
        refiner.eval()
        return refiner


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    payload = {
        "run_config": checkpoint.run_config.to_dict(),
        "vocab": checkpoint.vocab_tokens,
        "stage1": checkpoint.stage1_state,
        "denoiser": checkpoint.denoiser_state,
        "fusion": checkpoint.fusion_state,
        "refine": checkpoint.refine_state,
        "counters": checkpoint.counters,
        "best_val": checkpoint.best_val,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(
        run_config=RunConfig.from_dict(payload["run_config"]),
        vocab_tokens=list(payload["vocab"]),
        stage1_state=payload["stage1"],
        denoiser_state=payload["denoiser"],
        fusion_state=payload["fusion"],
        refine_state=payload["refine"],
        counters=payload.get("counters") or {},
        best_val=payload.get("best_val"),
    )
