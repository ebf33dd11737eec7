"""View rendering.

Conventions (must stay in lockstep with the consumer's view generator, and
are pinned by the shared golden tests): images are 8-bit sRGB; crops come
straight from the views file; patch resize is bilinear, alpha resize is
nearest; rotation is counter-clockwise in 90-degree steps applied after the
resize; the horizontal flip comes after the rotation.
"""

from __future__ import annotations

import numpy as np
import cv2

from .errors import UsageError
from .formats import View


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def compute_crop(
    centroid: tuple[float, float],
    image_size: tuple[int, int],
    config: dict,
    scale_index: int,
    offset_index: int,
) -> tuple[int, int, int, int]:
    """Recompute a crop rectangle from first principles.

    Used to cross-check the rectangles the views file carries: centered on
    the mask centroid, sized base_crop_fraction * min(H, W) * scale, shifted
    on a 3x3 offset grid, then translated back inside the image.
    """
    h, w = int(image_size[0]), int(image_size[1])
    cy, cx = centroid
    base = float(config["base_crop_fraction"]) * min(h, w)
    side = round_half_up(base * float(config["scale_factors"][scale_index]))
    side = max(1, min(side, h, w))
    if int(config["num_offset"]) == 1:
        offsets = [(0, 0)]
    else:
        d = round_half_up(side * float(config["offset_fraction"]))
        offsets = [(dy, dx) for dy in (-d, 0, d) for dx in (-d, 0, d)]
    dy, dx = offsets[offset_index]
    x0 = min(max(round_half_up(cx - side / 2.0) + dx, 0), w - side)
    y0 = min(max(round_half_up(cy - side / 2.0) + dy, 0), h - side)
    return (x0, y0, side, side)


def render_view(
    image: np.ndarray,
    mask: np.ndarray | None,
    view: View,
    out_side: int,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Crop, resize, rotate, flip; returns (patch, alpha or None)."""
    x, y, w, h = view.crop
    if not (0 <= x and 0 <= y and x + w <= image.shape[1] and y + h <= image.shape[0]):
        raise UsageError(f"crop {view.crop} outside image {image.shape[:2]}")
    patch = image[y:y + h, x:x + w]
    if (w, h) != (out_side, out_side):
        patch = cv2.resize(patch, (out_side, out_side), interpolation=cv2.INTER_LINEAR)
    else:
        patch = patch.copy()

    alpha: np.ndarray | None
    if view.mask_mode == "none":
        alpha = None
    elif view.mask_mode == "full_foreground":
        alpha = np.ones((out_side, out_side), dtype=np.uint8)
    else:
        if mask is None:
            raise UsageError("mask_mode='instance' needs a mask")
        sub = (mask[y:y + h, x:x + w] != 0).astype(np.uint8)
        if (w, h) != (out_side, out_side):
            sub = cv2.resize(sub, (out_side, out_side), interpolation=cv2.INTER_NEAREST)
        alpha = sub

    k = (view.rotation // 90) % 4
    if k:
        patch = np.ascontiguousarray(np.rot90(patch, k))
        if alpha is not None:
            alpha = np.ascontiguousarray(np.rot90(alpha, k))
    if view.flip == "horizontal":
        patch = np.ascontiguousarray(np.fliplr(patch))
        if alpha is not None:
            alpha = np.ascontiguousarray(np.fliplr(alpha))
    return patch, alpha
