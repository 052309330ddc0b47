"""Bbox-based target-segment selection over connected components."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import EmptyResultError

# 4-connectivity
_STRUCTURE = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


def select_target_mask(
    labels: np.ndarray, bbox: tuple[int, int, int, int]
) -> np.ndarray:
    """Pick the largest connected segment lying entirely inside ``bbox``.

    ``labels`` is an integer map with 0 as background; segments are the
    4-connected components of each nonzero id. The bbox is inclusive
    (x_min, y_min, x_max, y_max). Ties are broken by smallest id, then by
    raster order of the component's first pixel.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    x_min, y_min, x_max, y_max = bbox
    height, width = labels.shape
    if not (0 <= x_min <= x_max < width and 0 <= y_min <= y_max < height):
        raise ValueError(f"bbox {bbox} does not fit the {height}x{width} frame")

    inside = np.zeros_like(labels, dtype=bool)
    inside[y_min : y_max + 1, x_min : x_max + 1] = True

    best_key = None
    best_mask = None
    for segment_id in np.unique(labels):
        if segment_id == 0:
            continue
        components, count = ndimage.label(labels == segment_id, structure=_STRUCTURE)
        for comp in range(1, count + 1):
            mask = components == comp
            if np.any(mask & ~inside):
                continue
            area = int(mask.sum())
            first_pixel = int(np.flatnonzero(mask)[0])
            key = (-area, int(segment_id), first_pixel)
            if best_key is None or key < best_key:
                best_key = key
                best_mask = mask
    if best_mask is None:
        raise EmptyResultError("no segment is fully contained in the bbox")
    return best_mask.astype(np.uint8)
