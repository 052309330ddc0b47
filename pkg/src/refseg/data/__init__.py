"""Synthetic referring-segmentation dataset: generation, storage, loading."""

from .scenes import ObjectSpec, SceneSpec, generate_scene
from .render import SampleRecord, render_sample, render_scene, resolve_instruction
from .segments import select_target_mask
from .store import (
    DatasetManifest,
    build_dataset,
    load_manifest,
    load_split,
    split_dataset,
)

__all__ = [
    "ObjectSpec",
    "SceneSpec",
    "generate_scene",
    "SampleRecord",
    "render_sample",
    "render_scene",
    "resolve_instruction",
    "select_target_mask",
    "DatasetManifest",
    "build_dataset",
    "load_manifest",
    "load_split",
    "split_dataset",
]
