"""Rasterization, instruction templating, and the rule-based instruction resolver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import GenerationError
from .scenes import (
    BACKGROUND,
    COLORS,
    PALETTE,
    QUADRANTS,
    ROOMS,
    SHAPES,
    SIZE_CLASSES,
    ObjectSpec,
    SceneSpec,
)

VERBS = ("fetch", "grab", "take", "lift")


@dataclass
class SampleRecord:
    """One image + instruction + ground-truth mask; the dataset atom."""

    sample_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    instruction: str
    gt_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    target_bbox: tuple[int, int, int, int]  # inclusive (x_min, y_min, x_max, y_max)
    tokens: object | None = None  # TokenSequence, attached at load time
    meta: dict = field(default_factory=dict)


def coverage_mask(obj: ObjectSpec, image_size: int) -> np.ndarray:
    """Exact boolean pixel membership of an object, ignoring occlusion."""
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    cx, cy = obj.center
    h = obj.half_extent
    if obj.shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= h**2
    if obj.shape == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= h
    if obj.shape == "triangle":
        # upward triangle: apex at (cx, cy-h), base from (cx-h, cy+h) to (cx+h, cy+h)
        dy = ys - (cy - h)
        return (dy >= 0) & (dy <= 2 * h) & (2 * np.abs(xs - cx) <= dy)
    raise ValueError(f"unknown shape {obj.shape!r}")


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Painter's-algorithm raster of a scene.

    Returns (image, label_map): image is float32 (H, W, 3) in [0, 1]; the
    label map holds 0 for background and i+1 for the topmost object i.
    """
    size = scene.image_size
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = np.asarray(BACKGROUND, dtype=np.float32) / 255.0
    label_map = np.zeros((size, size), dtype=np.int32)
    for index, obj in enumerate(scene.objects):
        cover = coverage_mask(obj, size)
        image[cover] = np.asarray(PALETTE[obj.color], dtype=np.float32) / 255.0
        label_map[cover] = index + 1
    return image, label_map


def build_instruction(scene: SceneSpec, rng: np.random.Generator) -> str:
    """Two-clause template: navigation clause plus manipulation clause."""
    target = scene.target
    verb = VERBS[rng.integers(len(VERBS))]
    quadrant = target.quadrant(scene.image_size)
    return (
        f"Go to the {scene.room} and {verb} the "
        f"{target.size_class} {target.color} {target.shape} in the {quadrant}"
    )


def resolve_instruction(instruction: str, scene: SceneSpec) -> int:
    """Recover the referred object index from a templated instruction.

    Matches the (size, color, shape, quadrant) attributes mentioned in the
    text against the scene; raises LookupError unless exactly one object fits.
    """
    text = instruction.lower()
    words = set(text.split())
    shape = next((s for s in SHAPES if s in words), None)
    color = next((c for c in COLORS if c in words), None)
    size_class = next((s for s in SIZE_CLASSES if s in words), None)
    quadrant = next((q for q in QUADRANTS if q in text), None)
    if None in (shape, color, size_class, quadrant):
        raise LookupError(f"could not parse attributes from {instruction!r}")
    matches = [
        i
        for i, obj in enumerate(scene.objects)
        if obj.shape == shape
        and obj.color == color
        and obj.size_class == size_class
        and obj.quadrant(scene.image_size) == quadrant
    ]
    if len(matches) != 1:
        raise LookupError(
            f"instruction matches {len(matches)} objects, expected exactly one"
        )
    return matches[0]


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def render_sample(
    scene: SceneSpec, sample_id: str = "", min_target_pixels: int = 1
) -> SampleRecord:
    """Rasterize a scene into a full sample record.

    The ground-truth mask contains exactly the target pixels that survive
    occlusion by later-drawn objects; a target below ``min_target_pixels``
    visible pixels rejects the scene.
    """
    image, label_map = render_scene(scene)
    gt_mask = (label_map == scene.target_index + 1).astype(np.uint8)
    visible = int(gt_mask.sum())
    if visible < min_target_pixels:
        raise GenerationError(
            f"target has {visible} visible pixels (< {min_target_pixels})"
        )
    rng = np.random.default_rng([scene.seed, 1])
    instruction = build_instruction(scene, rng)
    target = scene.target
    return SampleRecord(
        sample_id=sample_id,
        image=image,
        instruction=instruction,
        gt_mask=gt_mask,
        target_bbox=_tight_bbox(gt_mask),
        meta={
            "room": scene.room,
            "scene_seed": scene.seed,
            "target_index": scene.target_index,
            "target": {
                "shape": target.shape,
                "color": target.color,
                "size_class": target.size_class,
                "quadrant": target.quadrant(scene.image_size),
            },
            "num_objects": len(scene.objects),
        },
    )
