"""End-to-end experiment drivers: seeded pipeline runs and seed sweeps."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import RunConfig
from .data.store import load_split, load_vocab
from .pipeline import build_refiner, build_stage1, build_unet
from .training import (
    evaluate_masks,
    predict_masks,
    records_to_tensors,
    set_seed,
    stage1_outputs,
    train_denoiser,
    train_stage1,
    train_stage2,
)


def load_tensors(data_root: str | Path, run_config: RunConfig) -> dict:
    vocab = load_vocab(data_root)
    splits = {}
    for split in ("train", "val", "test"):
        records = load_split(data_root, split)
        splits[split] = records_to_tensors(records, vocab, run_config.model.max_tokens)
    splits["vocab"] = vocab
    return splits


def run_seed(
    data_root: str | Path,
    run_config: RunConfig,
    seed: int,
    use_diffusion: bool = True,
    checkpoint_path: str | Path | None = None,
    splits: dict | None = None,
) -> dict:
    """Train both stages with one seed and evaluate on the test split.

    Stage 1 trains on the train split with validation-mIoU model selection;
    the denoiser trains on the train images; stage 2 trains on the val split
    with early stopping. Returns test mIoUs for both stages (stage-2 entries
    are None when ``use_diffusion`` is false).
    """
    if splits is None:
        splits = load_tensors(data_root, run_config)
    vocab = splits["vocab"]

    cfg = dataclasses.replace(run_config)
    cfg.stage1 = dataclasses.replace(run_config.stage1, seed=seed)
    cfg.denoiser = dataclasses.replace(run_config.denoiser, seed=seed)
    cfg.stage2 = dataclasses.replace(run_config.stage2, seed=seed)

    set_seed(seed)
    stage1 = build_stage1(cfg, vocab.size)
    stage1_history = train_stage1(stage1, splits["train"], cfg.stage1, splits["val"])

    refiner = None
    stage2_history = None
    if use_diffusion:
        unet = build_unet(cfg)
        refiner = build_refiner(cfg, unet)
        train_denoiser(unet, splits["train"].images, refiner.schedule, cfg.denoiser)
        val_out = stage1_outputs(stage1, splits["val"])
        stage2_history = train_stage2(refiner, splits["val"], val_out, cfg.stage2)

    predictions = predict_masks(
        stage1, splits["test"], refiner, noise_seed=cfg.stage2.eval_noise_seed
    )
    stage1_result = evaluate_masks(predictions["mask_intermediate"], splits["test"])
    stage2_result = (
        evaluate_masks(predictions["mask_diffusion"], splits["test"])
        if use_diffusion
        else None
    )

    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            Checkpoint(
                run_config=cfg,
                vocab_tokens=vocab.tokens,
                stage1_state=stage1.state_dict(),
                denoiser_state=refiner.unet.state_dict() if refiner else None,
                fusion_state=refiner.fusion.state_dict() if refiner else None,
                refine_state=refiner.head.state_dict() if refiner else None,
                counters={"seed": seed},
                best_val=stage1_history.get("best_val_miou"),
            ),
        )

    return {
        "seed": seed,
        "stage1_miou": stage1_result.miou,
        "stage2_miou": stage2_result.miou if stage2_result else None,
        "stage1_result": stage1_result,
        "stage2_result": stage2_result,
        "stage1_history": stage1_history,
        "stage2_history": stage2_history,
    }


def seed_sweep(
    data_root: str | Path,
    run_config: RunConfig,
    seeds,
    use_diffusion: bool = True,
    splits: dict | None = None,
) -> dict:
    """Run the pipeline across seeds and summarize stage-1/stage-2 test mIoU."""
    if splits is None:
        splits = load_tensors(data_root, run_config)
    runs = [
        run_seed(data_root, run_config, seed, use_diffusion, splits=splits)
        for seed in seeds
    ]
    summary = {
        "runs": runs,
        "stage1_mious": [r["stage1_miou"] for r in runs],
        "stage1_median": float(np.median([r["stage1_miou"] for r in runs])),
    }
    if use_diffusion:
        deltas = [r["stage2_miou"] - r["stage1_miou"] for r in runs]
        summary["stage2_mious"] = [r["stage2_miou"] for r in runs]
        summary["stage2_median"] = float(np.median(summary["stage2_mious"]))
        summary["deltas"] = deltas
        summary["delta_median"] = float(np.median(deltas))
        summary["worst_delta"] = float(min(deltas))
    return summary
