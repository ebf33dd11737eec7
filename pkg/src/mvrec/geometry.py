"""Multi-view crop/transform generation for defect instances.

Each instance yields V views: fixed-size square crops centered on the mask
centroid, repeated at several scales, shifted over a 3x3 offset grid, and
optionally rotated/flipped. All crop arithmetic is integer and pure, so the
emitted specs are byte-stable; the views file is the contract an external
embedding exporter consumes.

Conventions (shared with any exporter):
  - crop = (x, y, w, h) in source pixels, w = h, fully inside the image
  - offsets enumerate row-major over (dy, dx) in {-d, 0, +d}^2, d = side/8
  - rotation is counter-clockwise in multiples of 90 degrees, applied after
    resize; flip (left-right) applied after rotation
  - image resampling bilinear, mask nearest
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable

import cv2
import numpy as np

from .dataset import DatasetManifest, DefectInstance
from .errors import UsageError

VIEWS_FORMAT = "mvrec-views/1"

MASK_MODES = ("instance", "full_foreground", "none")
FLIPS = ("none", "horizontal")


@dataclass(frozen=True)
class ViewSpec:
    instance_id: str
    view_id: int
    crop: tuple[int, int, int, int]  # x, y, w, h
    scale_index: int
    offset_index: int
    rotation: int  # 0 | 90 | 180 | 270
    flip: str  # none | horizontal
    mask_mode: str  # instance | full_foreground | none


@dataclass(frozen=True)
class AugmentConfig:
    num_scale: int = 3
    num_offset: int = 9
    scale_factors: tuple[float, ...] = (1.0, 1.5, 2.0)
    offset_fraction: float = 0.125  # of crop side
    base_crop_fraction: float = 1.0 / 3.0  # of min(H, W)
    enable_rotation: bool = False
    enable_flip: bool = False
    mask_mode: str = "instance"

    def __post_init__(self):
        if self.num_offset not in (1, 9):
            raise UsageError(f"num_offset must be 1 or 9, got {self.num_offset}")
        if self.num_scale < 1 or len(self.scale_factors) != self.num_scale:
            raise UsageError(
                f"need num_scale ({self.num_scale}) scale factors, "
                f"got {len(self.scale_factors)}")
        if any(s <= 0 for s in self.scale_factors):
            raise UsageError("scale factors must be positive")
        if not 0 < self.base_crop_fraction <= 1:
            raise UsageError(f"base_crop_fraction {self.base_crop_fraction} outside (0, 1]")
        if not 0 <= self.offset_fraction < 0.5:
            raise UsageError(f"offset_fraction {self.offset_fraction} outside [0, 0.5)")
        if self.mask_mode not in MASK_MODES:
            raise UsageError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")

    @property
    def views_per_instance(self) -> int:
        v = self.num_scale * self.num_offset
        if self.enable_rotation:
            v *= 4
        if self.enable_flip:
            v *= 2
        return v


def _round_half_up(x: float) -> int:
    # avoids banker's rounding so crop sizes are platform-stable
    return int(np.floor(x + 0.5))


def generate_views(
    instance: DefectInstance,
    image_size: tuple[int, int],
    config: AugmentConfig,
) -> list[ViewSpec]:
    """Emit exactly config.views_per_instance specs for one instance.

    Crops are centered on the mask centroid, sized base_crop * scale, shifted
    by the offset grid, then translated (never shrunk) back inside the image.
    """
    h, w = int(image_size[0]), int(image_size[1])
    if h < 1 or w < 1:
        raise UsageError(f"bad image size {image_size}")
    cy, cx = instance.centroid()  # raises EmptyInstance on zero-area masks
    base = config.base_crop_fraction * min(h, w)

    rotations = (0, 90, 180, 270) if config.enable_rotation else (0,)
    flips = FLIPS if config.enable_flip else ("none",)

    specs: list[ViewSpec] = []
    view_id = 0
    for s_idx in range(config.num_scale):
        side = _round_half_up(base * config.scale_factors[s_idx])
        side = max(1, min(side, h, w))
        if config.num_offset == 1:
            offsets = [(0, 0)]
        else:
            d = _round_half_up(side * config.offset_fraction)
            offsets = [(dy, dx) for dy in (-d, 0, d) for dx in (-d, 0, d)]
        x_base = _round_half_up(cx - side / 2.0)
        y_base = _round_half_up(cy - side / 2.0)
        for o_idx, (dy, dx) in enumerate(offsets):
            x0 = min(max(x_base + dx, 0), w - side)
            y0 = min(max(y_base + dy, 0), h - side)
            for rot in rotations:
                for flip in flips:
                    specs.append(
                        ViewSpec(
                            instance_id=instance.instance_id,
                            view_id=view_id,
                            crop=(x0, y0, side, side),
                            scale_index=s_idx,
                            offset_index=o_idx,
                            rotation=rot,
                            flip=flip,
                            mask_mode=config.mask_mode,
                        )
                    )
                    view_id += 1
    assert len(specs) == config.views_per_instance
    return specs


def render_view(
    image: np.ndarray,
    mask: np.ndarray | None,
    spec: ViewSpec,
    out_side: int,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Materialize one view: crop, resize, rotate, flip.

    Returns (patch, alpha); alpha is None for mask_mode="none", all-ones for
    "full_foreground", else the instance mask cropped/resized with nearest
    interpolation. Rotation/flip hit patch and alpha identically.
    """
    x, y, w, h = spec.crop
    if not (0 <= x and 0 <= y and x + w <= image.shape[1] and y + h <= image.shape[0]):
        raise UsageError(f"crop {spec.crop} outside image {image.shape[:2]}")
    patch = image[y:y + h, x:x + w]
    if (w, h) != (out_side, out_side):
        patch = cv2.resize(patch, (out_side, out_side), interpolation=cv2.INTER_LINEAR)
    else:
        patch = patch.copy()

    alpha: np.ndarray | None
    if spec.mask_mode == "none":
        alpha = None
    elif spec.mask_mode == "full_foreground":
        alpha = np.ones((out_side, out_side), dtype=np.uint8)
    else:
        if mask is None:
            raise UsageError("mask_mode='instance' needs a mask")
        sub = (mask[y:y + h, x:x + w] != 0).astype(np.uint8)
        if (w, h) != (out_side, out_side):
            sub = cv2.resize(sub, (out_side, out_side), interpolation=cv2.INTER_NEAREST)
        alpha = sub

    k = (spec.rotation // 90) % 4
    if k:
        patch = np.ascontiguousarray(np.rot90(patch, k))
        if alpha is not None:
            alpha = np.ascontiguousarray(np.rot90(alpha, k))
    if spec.flip == "horizontal":
        patch = np.ascontiguousarray(np.fliplr(patch))
        if alpha is not None:
            alpha = np.ascontiguousarray(np.fliplr(alpha))
    return patch, alpha


ABLATION_COMBOS = (
    "none",
    "scale",
    "rotate",
    "flip",
    "offset",
    "scale+rotate",
    "scale+flip",
    "scale+offset",
)


def ablation_view_sets(
    instance: DefectInstance,
    image_size: tuple[int, int],
    config: AugmentConfig,
) -> dict[str, list[ViewSpec]]:
    """The eight augmentation combinations as separate named view lists.

    "scale" uses config's scale factors; everything else inherits config's
    crop geometry. View counts: 1/3/4/2/9/12/6/27 under the defaults.
    """
    out: dict[str, list[ViewSpec]] = {}
    for name in ABLATION_COMBOS:
        parts = set(name.split("+"))
        variant = replace(
            config,
            num_scale=config.num_scale if "scale" in parts else 1,
            scale_factors=config.scale_factors if "scale" in parts else (1.0,),
            num_offset=9 if "offset" in parts else 1,
            enable_rotation="rotate" in parts,
            enable_flip="flip" in parts,
        )
        out[name] = generate_views(instance, image_size, variant)
    return out


# ---------------------------------------------------------------------------
# views file (JSONL: header record with the config, then one record per view)


def views_for_manifest(
    manifest: DatasetManifest, config: AugmentConfig
) -> list[ViewSpec]:
    specs: list[ViewSpec] = []
    for inst in manifest.instances:
        specs.extend(generate_views(inst, inst.image_size, config))
    return specs


def write_views_file(
    path: str | Path, specs: Iterable[ViewSpec], config: AugmentConfig
) -> None:
    header = {"format": VIEWS_FORMAT, "config": asdict(config)}
    # tuples serialize as lists; normalize so reads compare equal
    header["config"]["scale_factors"] = list(config.scale_factors)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in specs:
            rec = {
                "instance_id": s.instance_id,
                "view_id": s.view_id,
                "crop": list(s.crop),
                "scale_index": s.scale_index,
                "offset_index": s.offset_index,
                "rotation": s.rotation,
                "flip": s.flip,
                "mask_mode": s.mask_mode,
            }
            fh.write(json.dumps(rec) + "\n")


def read_views_file(path: str | Path) -> tuple[AugmentConfig, list[ViewSpec]]:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        header = json.loads(first)
        if header.get("format") != VIEWS_FORMAT:
            raise ValueError(f"not a views file: format={header.get('format')!r}")
        cfg_doc = dict(header["config"])
        cfg_doc["scale_factors"] = tuple(cfg_doc["scale_factors"])
        config = AugmentConfig(**cfg_doc)
        specs = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            specs.append(
                ViewSpec(
                    instance_id=r["instance_id"],
                    view_id=int(r["view_id"]),
                    crop=tuple(int(v) for v in r["crop"]),
                    scale_index=int(r["scale_index"]),
                    offset_index=int(r["offset_index"]),
                    rotation=int(r["rotation"]),
                    flip=r["flip"],
                    mask_mode=r["mask_mode"],
                )
            )
    return config, specs


def expected_view_keys(specs: Iterable[ViewSpec]) -> dict[str, list[int]]:
    """instance_id -> sorted view ids; the coverage contract for embeddings."""
    out: dict[str, list[int]] = {}
    for s in specs:
        out.setdefault(s.instance_id, []).append(s.view_id)
    return {k: sorted(v) for k, v in out.items()}
