"""Training loops for both stages, the denoiser, early stopping, and evaluation."""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass

import numpy as np
import torch

from .config import DenoiserConfig, Stage1Config, Stage2Config
from .diffusion import NoiseSchedule, NoiseUNet, mean_absolute_error
from .errors import TrainingError
from .head import binarize, cross_entropy_loss
from .metrics import EvalResult, evaluate
from .pipeline import DiffusionRefiner, Stage1Model
from .text import Vocabulary, tokenize


def set_seed(seed: int) -> None:
    """Seed all RNGs and pin single-threaded intra-op execution.

    Multi-threaded CPU backward kernels accumulate in a run-dependent order,
    which breaks the identical-runs contract; one thread keeps training
    bit-reproducible (and is no slower on the 2-core reference box).
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.set_num_threads(1)


@dataclass
class SplitTensors:
    """One split loaded into memory as batched tensors."""

    images: torch.Tensor  # (N, 3, H, W) float32 in [0, 1]
    masks: torch.Tensor  # (N, H, W) float32 in {0, 1}
    token_ids: torch.Tensor  # (N, l) int64
    pad_mask: torch.Tensor  # (N, l) bool
    sample_ids: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


def records_to_tensors(records, vocab: Vocabulary, max_tokens: int) -> SplitTensors:
    images = torch.stack(
        [torch.from_numpy(r.image.astype(np.float32)).permute(2, 0, 1) for r in records]
    )
    masks = torch.stack(
        [torch.from_numpy(r.gt_mask.astype(np.float32)) for r in records]
    )
    sequences = [tokenize(r.instruction, vocab, max_tokens) for r in records]
    token_ids = torch.stack([torch.from_numpy(s.ids) for s in sequences])
    pad_mask = torch.stack([torch.from_numpy(s.pad_mask()) for s in sequences])
    return SplitTensors(
        images=images,
        masks=masks,
        token_ids=token_ids,
        pad_mask=pad_mask,
        sample_ids=[r.sample_id for r in records],
    )


class EarlyStopper:
    """Stop after ``patience`` iterations without improvement, outside warm-up.

    ``step`` is called once per iteration with the monitored loss and the
    1-based epoch; it returns (improved, stop). Stopping is suppressed during
    the warm-up epochs even if the patience budget is already exhausted.
    """

    def __init__(self, patience: int = 50, warmup_epochs: int = 3):
        self.patience = patience
        self.warmup_epochs = warmup_epochs
        self.best = math.inf
        self.iterations_since_best = 0

    def step(self, loss: float, epoch: int) -> tuple[bool, bool]:
        if loss < self.best:
            self.best = loss
            self.iterations_since_best = 0
            return True, False
        self.iterations_since_best += 1
        stop = (
            self.iterations_since_best >= self.patience and epoch > self.warmup_epochs
        )
        return False, stop


def _batches(count: int, batch_size: int, generator: torch.Generator | None = None):
    if generator is None:
        order = torch.arange(count)
    else:
        order = torch.randperm(count, generator=generator)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


@torch.no_grad()
def stage1_outputs(
    model: Stage1Model, data: SplitTensors, batch_size: int = 32
) -> dict:
    """Frozen stage-1 forward over a split: probabilities plus decoded stacks."""
    model.eval()
    probs, stacks = [], None
    for idx in _batches(len(data), batch_size):
        p, _, stack, _ = model(
            data.images[idx], data.token_ids[idx], data.pad_mask[idx]
        )
        probs.append(p)
        if stacks is None:
            stacks = [[] for _ in stack]
        for level, tensor in enumerate(stack):
            stacks[level].append(tensor)
    return {
        "probability": torch.cat(probs),
        "stack": [torch.cat(level) for level in stacks],
    }


def evaluate_masks(pred_masks: torch.Tensor, data: SplitTensors) -> EvalResult:
    preds = [pred_masks[i].numpy() for i in range(len(data))]
    gts = [data.masks[i].numpy() > 0.5 for i in range(len(data))]
    return evaluate(preds, gts)


def train_stage1(
    model: Stage1Model,
    train_data: SplitTensors,
    cfg: Stage1Config,
    val_data: SplitTensors | None = None,
) -> dict:
    """Cross-entropy training of the full stage-1 model.

    Tracks validation mIoU per epoch when a validation split is given and
    restores the best-scoring weights at the end.
    """
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    history = {"loss": [], "val_miou": []}
    best_state = None
    best_miou = -1.0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        epoch_losses = []
        for idx in _batches(len(train_data), cfg.batch_size, generator):
            _, logits, _, _ = model(
                train_data.images[idx],
                train_data.token_ids[idx],
                train_data.pad_mask[idx],
            )
            # logit-space form of the per-pixel two-class cross-entropy;
            # identical value, but gradients survive softmax saturation
            loss = torch.nn.functional.cross_entropy(
                logits, train_data.masks[idx].long()
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite stage-1 loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
        if val_data is not None:
            outputs = stage1_outputs(model, val_data)
            miou = evaluate_masks(binarize(outputs["probability"]), val_data).miou
            history["val_miou"].append(miou)
            if miou > best_miou:
                best_miou = miou
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    history["best_val_miou"] = best_miou if val_data is not None else None
    return history


def train_denoiser(
    unet: NoiseUNet,
    images: torch.Tensor,
    schedule: NoiseSchedule,
    cfg: DenoiserConfig,
) -> dict:
    """Standard noise-prediction training on the image corpus."""
    optimizer = torch.optim.Adam(unet.parameters(), lr=cfg.lr)
    generator = torch.Generator().manual_seed(cfg.seed)
    alpha_bars = torch.from_numpy(schedule.alpha_bars).float()
    x0 = images * 2.0 - 1.0
    history = {"loss": []}
    unet.train()
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        for idx in _batches(x0.shape[0], cfg.batch_size, generator):
            batch = x0[idx]
            t = torch.randint(
                1, schedule.timesteps + 1, (batch.shape[0],), generator=generator
            )
            eps = torch.randn(batch.shape, generator=generator)
            abar = alpha_bars[t - 1].view(-1, 1, 1, 1)
            x_t = abar.sqrt() * batch + (1.0 - abar).sqrt() * eps
            loss = torch.mean((unet(x_t, t) - eps) ** 2)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite denoiser loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        history["loss"].append(float(np.mean(epoch_losses)))
    unet.eval()
    return history


def train_stage2(
    refiner: DiffusionRefiner,
    data: SplitTensors,
    stage1_out: dict,
    cfg: Stage2Config,
) -> dict:
    """MAE training of the refinement head on frozen stage-1 outputs.

    The monitored loss is the refinement MAE over the full training split,
    computed with fixed evaluation noise so the curve reflects parameter
    changes only; the best-loss weights are restored at the end.
    """
    for parameter in refiner.unet.parameters():
        parameter.requires_grad_(False)
    optimizer = torch.optim.Adam(
        refiner.trainable_parameters(), lr=cfg.lr, betas=cfg.betas
    )
    p_it = stage1_out["probability"]
    stack = stage1_out["stack"]

    # fixed noise draws for the monitored loss
    eval_generator = torch.Generator().manual_seed(cfg.eval_noise_seed)
    eval_xt, eval_features = _batched_features(refiner, data.images, eval_generator)

    def monitored_loss() -> float:
        refiner.eval()
        with torch.no_grad():
            losses = []
            for idx in _batches(len(data), 64):
                refined = refiner.refine(
                    eval_xt[idx],
                    {k: v[idx] for k, v in eval_features.items()},
                    [level[idx] for level in stack],
                    p_it[idx],
                )
                losses.append(
                    mean_absolute_error(refined, data.masks[idx]).item()
                    * len(idx)
                )
        return float(sum(losses) / len(data))

    stopper = EarlyStopper(cfg.patience, cfg.warmup_epochs)
    initial = monitored_loss()
    stopper.step(initial, epoch=0)
    best_state = _stage2_state(refiner)
    history = {"monitor": [initial], "stopped_at": None, "iterations": 0}

    train_generator = torch.Generator().manual_seed(cfg.seed)
    iteration = 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        if stopped:
            break
        for idx in _batches(len(data), cfg.batch_size, train_generator):
            refiner.train()
            refiner.unet.eval()
            x_t, features = refiner.compute_features(
                data.images[idx], generator=train_generator
            )
            refined = refiner.refine(
                x_t,
                features,
                [level[idx] for level in stack],
                p_it[idx],
            )
            loss = mean_absolute_error(refined, data.masks[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite stage-2 loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            iteration += 1

            current = monitored_loss()
            history["monitor"].append(current)
            improved, stop = stopper.step(current, epoch)
            if improved:
                best_state = _stage2_state(refiner)
            if stop:
                history["stopped_at"] = iteration
                stopped = True
                break
    history["iterations"] = iteration
    history["best_monitor"] = stopper.best
    refiner.fusion.load_state_dict(best_state["fusion"])
    refiner.head.load_state_dict(best_state["head"])
    refiner.eval()
    return history


def _stage2_state(refiner: DiffusionRefiner) -> dict:
    return {
        "fusion": copy.deepcopy(refiner.fusion.state_dict()),
        "head": copy.deepcopy(refiner.head.state_dict()),
    }


def _batched_features(
    refiner: DiffusionRefiner,
    images: torch.Tensor,
    generator: torch.Generator,
    batch_size: int = 32,
) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    xts, feats = [], None
    for idx in _batches(images.shape[0], batch_size):
        x_t, features = refiner.compute_features(images[idx], generator=generator)
        xts.append(x_t)
        if feats is None:
            feats = {k: [] for k in features}
        for k, v in features.items():
            feats[k].append(v)
    return torch.cat(xts), {k: torch.cat(v) for k, v in feats.items()}


@torch.no_grad()
def predict_masks(
    stage1: Stage1Model,
    data: SplitTensors,
    refiner: DiffusionRefiner | None = None,
    batch_size: int = 32,
    noise_seed: int = 0,
) -> dict:
    """Deterministic split inference for one or both stages."""
    outputs = stage1_outputs(stage1, data, batch_size)
    result = {
        "p_intermediate": outputs["probability"],
        "mask_intermediate": binarize(outputs["probability"]),
    }
    if refiner is not None:
        refiner.eval()
        generator = torch.Generator().manual_seed(noise_seed)
        refined = []
        for idx in _batches(len(data), batch_size):
            refined.append(
                refiner(
                    data.images[idx],
                    [level[idx] for level in outputs["stack"]],
                    outputs["probability"][idx],
                    generator=generator,
                )
            )
        refined = torch.cat(refined)
        result["p_diffusion"] = refined
        result["mask_diffusion"] = binarize(refined)
    return result
