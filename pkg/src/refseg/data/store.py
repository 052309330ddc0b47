"""On-disk dataset layout: per-split PNG directories plus line-delimited manifests.

Layout under the dataset root:

    vocab.txt                  one token per line, PAD/UNK first
    <split>/manifest.txt       JSON header line, then one sample id per line
    <split>/samples.jsonl      one JSON record per sample (instruction + meta)
    <split>/images/<id>.png    RGB image
    <split>/masks/<id>.png     binary mask (0 / 255)
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..config import DatasetConfig
from ..errors import ConfigError, GenerationError
from ..text import Vocabulary
from .render import SampleRecord, render_sample
from .scenes import SceneSpec, generate_scene

SPLITS = ("train", "val", "test")


@dataclass
class DatasetManifest:
    split: str
    sample_ids: list[str]
    config: dict  # generation config echo, incl. counts, seed, vocabulary hash


def split_dataset(
    sample_ids: list[str], sizes: tuple[int, int, int], config_echo: dict
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition ids sequentially into disjoint train/val/test manifests."""
    if sum(sizes) != len(sample_ids):
        raise ConfigError(
            f"split sizes {sizes} sum to {sum(sizes)}, but {len(sample_ids)} "
            "samples were generated"
        )
    manifests = []
    start = 0
    for split, size in zip(SPLITS, sizes):
        manifests.append(
            DatasetManifest(
                split=split,
                sample_ids=list(sample_ids[start : start + size]),
                config=dict(config_echo),
            )
        )
        start += size
    return tuple(manifests)


def _sample_seed(base_seed: int, index: int, attempt: int) -> int:
    return int(np.random.SeedSequence([base_seed, index, attempt]).generate_state(1)[0])


def generate_records(config: DatasetConfig) -> list[SampleRecord]:
    """Generate the full corpus deterministically from (config, seed)."""
    config.validate()
    records = []
    for index in range(config.total):
        record = None
        for attempt in range(config.generation.max_attempts):
            seed = _sample_seed(config.seed, index, attempt)
            try:
                scene = generate_scene(seed, config.generation)
                record = render_sample(
                    scene,
                    sample_id=f"s{index:05d}",
                    min_target_pixels=config.generation.min_target_pixels,
                )
                break
            except GenerationError:
                continue
        if record is None:
            raise GenerationError(f"no valid scene found for sample index {index}")
        records.append(record)
    return records


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def save_manifest(path: Path, manifest: DatasetManifest) -> None:
    header = json.dumps({"split": manifest.split, "config": manifest.config})
    lines = [header] + manifest.sample_ids
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    return DatasetManifest(
        split=header["split"], sample_ids=lines[1:], config=header["config"]
    )


def build_dataset(out_dir: str | Path, config: DatasetConfig) -> dict:
    """Generate, split, and persist a dataset; returns a small summary dict."""
    out = Path(out_dir)
    records = generate_records(config)
    vocab = Vocabulary.build([r.instruction for r in records])

    config_echo = {
        "counts": {"train": config.train, "val": config.val, "test": config.test},
        "seed": config.seed,
        "image_size": config.generation.image_size,
        "generation": dataclasses.asdict(config.generation),
        "vocab_sha256": vocab.sha256(),
    }
    manifests = split_dataset(
        [r.sample_id for r in records],
        (config.train, config.val, config.test),
        config_echo,
    )

    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    by_id = {r.sample_id: r for r in records}
    for manifest in manifests:
        split_dir = out / manifest.split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "masks").mkdir(parents=True, exist_ok=True)
        save_manifest(split_dir / "manifest.txt", manifest)
        with open(split_dir / "samples.jsonl", "w") as fh:
            for sample_id in manifest.sample_ids:
                record = by_id[sample_id]
                _write_png(
                    split_dir / "images" / f"{sample_id}.png",
                    np.round(record.image * 255).astype(np.uint8),
                )
                _write_png(
                    split_dir / "masks" / f"{sample_id}.png",
                    record.gt_mask.astype(np.uint8) * 255,
                )
                fh.write(
                    json.dumps(
                        {
                            "id": sample_id,
                            "instruction": record.instruction,
                            "target_bbox": list(record.target_bbox),
                            "meta": record.meta,
                        }
                    )
                    + "\n"
                )
    return {
        "root": str(out),
        "total": config.total,
        "vocab_size": vocab.size,
        "vocab_sha256": vocab.sha256(),
    }


def load_vocab(root: str | Path) -> Vocabulary:
    return Vocabulary.load(Path(root) / "vocab.txt")


def load_split(root: str | Path, split: str) -> list[SampleRecord]:
    """Load all sample records of one split (tokens left unset)."""
    split_dir = Path(root) / split
    manifest = load_manifest(split_dir / "manifest.txt")
    rows = {}
    with open(split_dir / "samples.jsonl") as fh:
        for line in fh:
            row = json.loads(line)
            rows[row["id"]] = row
    records = []
    for sample_id in manifest.sample_ids:
        row = rows[sample_id]
        image = np.asarray(
            Image.open(split_dir / "images" / f"{sample_id}.png"), dtype=np.float32
        )
        mask = np.asarray(Image.open(split_dir / "masks" / f"{sample_id}.png"))
        records.append(
            SampleRecord(
                sample_id=sample_id,
                image=image / 255.0,
                instruction=row["instruction"],
                gt_mask=(mask > 127).astype(np.uint8),
                target_bbox=tuple(row["target_bbox"]),
                meta=row["meta"],
            )
        )
    return records
