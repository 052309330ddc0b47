"""Random multi-object scene specs with a uniquely describable target object."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import GenerationConfig
from ..errors import GenerationError

SHAPES = ("circle", "square", "triangle")

# 8 saturated colors, distinct from the light-gray background.
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 90, 220),
    "yellow": (230, 210, 50),
    "orange": (240, 140, 30),
    "purple": (140, 60, 190),
    "cyan": (50, 200, 210),
    "magenta": (220, 60, 180),
}
COLORS = tuple(PALETTE)
SIZE_CLASSES = ("small", "large")
# half-extent ranges in pixels at image_size 64, scaled linearly otherwise
SIZE_RANGES = {"small": (4, 6), "large": (8, 11)}
ROOMS = ("kitchen", "bedroom", "bathroom", "office", "hallway", "living room")
QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
BACKGROUND = (235, 235, 235)


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size_class: str
    center: tuple[int, int]  # (x, y) pixel coordinates
    half_extent: int

    def quadrant(self, image_size: int) -> str:
        x, y = self.center
        vertical = "top" if y < image_size / 2 else "bottom"
        horizontal = "left" if x < image_size / 2 else "right"
        return f"{vertical} {horizontal}"

    def bbox(self) -> tuple[int, int, int, int]:
        """Unoccluded extent, inclusive (x_min, y_min, x_max, y_max)."""
        x, y = self.center
        h = self.half_extent
        return (x - h, y - h, x + h, y + h)


@dataclass
class SceneSpec:
    objects: list[ObjectSpec]
    target_index: int
    room: str
    seed: int
    image_size: int

    @property
    def target(self) -> ObjectSpec:
        return self.objects[self.target_index]


def _draw_object(rng: np.random.Generator, image_size: int) -> ObjectSpec:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    size_class = SIZE_CLASSES[rng.integers(len(SIZE_CLASSES))]
    lo, hi = SIZE_RANGES[size_class]
    scale = image_size / 64
    lo = max(2, int(round(lo * scale)))
    hi = max(lo, int(round(hi * scale)))
    half = int(rng.integers(lo, hi + 1))
    # keep the full extent inside the frame
    cx = int(rng.integers(half, image_size - half))
    cy = int(rng.integers(half, image_size - half))
    return ObjectSpec(shape, color, size_class, (cx, cy), half)


def generate_scene(seed: int, config: GenerationConfig) -> SceneSpec:
    """Draw a scene satisfying the uniqueness invariant, deterministically in seed.

    No two objects may share (shape, color, size class, quadrant); retries a
    bounded number of times before signalling failure.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    room = ROOMS[rng.integers(len(ROOMS))]
    for _ in range(config.max_attempts):
        objects = [_draw_object(rng, config.image_size) for _ in range(count)]
        keys = {
            (o.shape, o.color, o.size_class, o.quadrant(config.image_size))
            for o in objects
        }
        if len(keys) == count:
            target_index = int(rng.integers(count))
            return SceneSpec(
                objects=objects,
                target_index=target_index,
                room=room,
                seed=seed,
                image_size=config.image_size,
            )
    raise GenerationError(
        f"could not draw {count} attribute-distinct objects in "
        f"{config.max_attempts} attempts (seed {seed})"
    )
