"""Command-line entry points: datagen, training verbs, eval, infer, report."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .config import DatasetConfig, GenerationConfig, RunConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data.store import build_dataset, load_split, load_vocab
from .errors import RefSegError
from .metrics import error_report, evaluate, format_report
from .pipeline import build_refiner, build_stage1, build_unet, infer
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


def _load_run_config(args) -> RunConfig:
    config = (
        RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    )
    config.validate()
    return config


def _load_split_tensors(data_root: str, split: str, run_config: RunConfig):
    vocab = load_vocab(data_root)
    records = load_split(data_root, split)
    return vocab, records_to_tensors(records, vocab, run_config.model.max_tokens)


def cmd_datagen(args) -> int:
    config = DatasetConfig(
        train=args.train,
        val=args.val,
        test=args.test,
        seed=args.seed,
        generation=GenerationConfig(image_size=args.size),
    )
    summary = build_dataset(args.out, config)
    print(json.dumps(summary))
    return 0


def cmd_train_stage1(args) -> int:
    run_config = _load_run_config(args)
    if args.epochs is not None:
        run_config.stage1 = dataclasses.replace(run_config.stage1, epochs=args.epochs)
    if args.lr is not None:
        run_config.stage1 = dataclasses.replace(run_config.stage1, lr=args.lr)
    if args.batch_size is not None:
        run_config.stage1 = dataclasses.replace(
            run_config.stage1, batch_size=args.batch_size
        )
    if args.seed is not None:
        run_config.stage1 = dataclasses.replace(run_config.stage1, seed=args.seed)
    if args.no_global_branch:
        run_config.model = dataclasses.replace(
            run_config.model, use_global_branch=False
        )

    vocab, train_data = _load_split_tensors(args.data, "train", run_config)
    _, val_data = _load_split_tensors(args.data, "val", run_config)
    set_seed(run_config.stage1.seed)
    model = build_stage1(run_config, vocab.size)
    history = train_stage1(model, train_data, run_config.stage1, val_data)
    save_checkpoint(
        args.out,
        Checkpoint(
            run_config=run_config,
            vocab_tokens=vocab.tokens,
            stage1_state=model.state_dict(),
            counters={"stage1_epochs": run_config.stage1.epochs},
            best_val=history.get("best_val_miou"),
        ),
    )
    print(f"stage-1 checkpoint written to {args.out}")
    return 0


def cmd_train_ddpm(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    run_config = checkpoint.run_config
    if args.epochs is not None:
        run_config.denoiser = dataclasses.replace(
            run_config.denoiser, epochs=args.epochs
        )
    if args.seed is not None:
        run_config.denoiser = dataclasses.replace(run_config.denoiser, seed=args.seed)
    _, train_data = _load_split_tensors(args.data, "train", run_config)
    set_seed(run_config.denoiser.seed)
    unet = build_unet(run_config)
    refiner = build_refiner(run_config, unet)
    train_denoiser(unet, train_data.images, refiner.schedule, run_config.denoiser)
    checkpoint.denoiser_state = unet.state_dict()
    save_checkpoint(args.out, checkpoint)
    print(f"denoiser checkpoint written to {args.out}")
    return 0


def cmd_train_stage2(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    run_config = checkpoint.run_config
    if args.epochs is not None:
        run_config.stage2 = dataclasses.replace(run_config.stage2, epochs=args.epochs)
    if args.seed is not None:
        run_config.stage2 = dataclasses.replace(run_config.stage2, seed=args.seed)
    if args.level_selection:
        selection = tuple(int(x) for x in args.level_selection.split(","))
        run_config.diffusion = dataclasses.replace(
            run_config.diffusion, level_selection=selection
        )

    _, val_data = _load_split_tensors(args.data, "val", run_config)
    stage1 = checkpoint.build_stage1()
    if checkpoint.denoiser_state is None:
        raise RefSegError("checkpoint has no trained denoiser; run train-ddpm first")
    set_seed(run_config.stage2.seed)
    unet = build_unet(run_config)
    unet.load_state_dict(checkpoint.denoiser_state)
    refiner = build_refiner(run_config, unet)
    val_out = stage1_outputs(stage1, val_data)
    history = train_stage2(refiner, val_data, val_out, run_config.stage2)
    checkpoint.run_config = run_config
    checkpoint.fusion_state = refiner.fusion.state_dict()
    checkpoint.refine_state = refiner.head.state_dict()
    checkpoint.counters["stage2_iterations"] = history["iterations"]
    checkpoint.best_val = history["best_monitor"]
    save_checkpoint(args.out, checkpoint)
    print(f"stage-2 checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    run_config = checkpoint.run_config
    _, data = _load_split_tensors(args.data, args.split, run_config)
    stage1 = checkpoint.build_stage1()
    refiner = checkpoint.build_refiner() if args.diffusion else None
    predictions = predict_masks(
        stage1, data, refiner, noise_seed=run_config.stage2.eval_noise_seed
    )
    key = "mask_diffusion" if args.diffusion else "mask_intermediate"
    result = evaluate_masks(predictions[key], data)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "iou"])
        for sample_id, value in zip(data.sample_ids, result.per_sample_iou):
            writer.writerow([sample_id, f"{value:.6f}"])
    summary = {
        "split": args.split,
        "diffusion": bool(args.diffusion),
        "n": result.n,
        "miou": result.miou,
        "oiou": result.oiou,
        "precision": {str(k): v for k, v in result.precision.items()},
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    _write_histogram(result.per_sample_iou, out_dir / "iou_histogram.png")
    print(json.dumps(summary))
    return 0


def _write_histogram(values, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(values, bins=20, range=(0.0, 1.0), color="#4878d0", edgecolor="black")
    ax.set_xlabel("IoU")
    ax.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_infer(args) -> int:
    from PIL import Image

    checkpoint = load_checkpoint(args.ckpt)
    stage1 = checkpoint.build_stage1()
    refiner = checkpoint.build_refiner() if args.diffusion else None
    image = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    result = infer(stage1, checkpoint.vocab, image, args.instruction, refiner)
    key = "mask_diffusion" if args.diffusion else "mask_intermediate"
    mask = result[key].astype(np.uint8) * 255
    Image.fromarray(mask).save(args.out)
    print(f"mask written to {args.out} ({int(result[key].sum())} foreground pixels)")
    return 0


def cmd_report(args) -> int:
    rows = []
    with open(args.results) as fh:
        for row in csv.DictReader(fh):
            rows.append((row["id"], float(row["iou"])))
    sample_ids = [r[0] for r in rows]
    ious = [r[1] for r in rows]
    # EvalResult from stored per-sample IoUs alone (mask sums unavailable here)
    from .metrics import EvalResult, PRECISION_THRESHOLDS

    result = EvalResult(
        per_sample_iou=ious,
        miou=float(np.mean(ious)),
        oiou=float("nan"),
        precision={k: sum(v > k for v in ious) / len(ious) for k in PRECISION_THRESHOLDS},
        n=len(ious),
    )
    worst_n = args.worst_n if args.worst_n is not None else min(100, result.n)
    report = error_report(result, sample_ids, worst_n)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    print(format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refseg",
        description="two-stage referring-expression segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=800)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train-stage1", help="train the crossmodal encoder/decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-global-branch", action="store_true")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-ddpm", help="train the noise-prediction UNet")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint to extend")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_ddpm)

    p = sub.add_parser("train-stage2", help="train the refinement head")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint with stage 1 + denoiser")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--level-selection", help="comma-separated level indices, e.g. 0,1,2")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.add_argument("--diffusion", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image given an instruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diffusion", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="worst-case error report from eval output")
    p.add_argument("--results", required=True, help="results.csv written by eval")
    p.add_argument("--worst-n", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RefSegError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
