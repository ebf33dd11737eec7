"""The export job: views -> rendered patches -> embeddings -> MVE1 file."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import cv2

from .backbones import load_encoder
from .errors import ImageMissing, KeyCollision, UsageError
from .formats import Manifest, View, read_manifest, read_views, write_mve
from .render import render_view


@dataclass(frozen=True)
class ExportJob:
    manifest_path: str
    views_path: str
    output_path: str
    images_root: str = ""
    backbone_id: str = "ViT-L/14"
    mask_mode_override: str | None = None
    batch_size: int = 32
    device: str = "cpu"
    input_size: int = 224
    stub_channels: int = 32


@dataclass
class ExportResult:
    output_path: Path
    coverage_path: Path
    records: int
    channels: int
    backbone_tag: str
    missing: dict = field(default_factory=dict)


def _resolve_image(path_str: str, images_root: str) -> Path:
    path = Path(path_str)
    if path.is_file():
        return path
    if images_root:
        candidate = Path(images_root) / path_str
        if candidate.is_file():
            return candidate
        # manifests built elsewhere may carry foreign absolute prefixes
        candidate = Path(images_root) / path.name
        if candidate.is_file():
            return candidate
    raise ImageMissing(f"image {path_str!r} not found (images_root={images_root!r})")


def _load_image(path: Path) -> np.ndarray:
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ImageMissing(f"unreadable image {path}")
    # cv2 decodes to BGR; everything downstream speaks 8-bit sRGB
    return np.ascontiguousarray(bgr[:, :, ::-1])


def export(job: ExportJob) -> ExportResult:
    manifest = read_manifest(job.manifest_path)
    _, views = read_views(job.views_path)
    if job.mask_mode_override is not None:
        if job.mask_mode_override not in ("instance", "full_foreground", "none"):
            raise UsageError(f"bad mask mode {job.mask_mode_override!r}")
        views = [replace(v, mask_mode=job.mask_mode_override) for v in views]
    if not views:
        raise UsageError(f"views file {job.views_path} holds no view records")

    seen: set[str] = set()
    for v in views:
        if v.key in seen:
            raise KeyCollision(f"views file repeats {v.key!r}")
        seen.add(v.key)

    mask_mode = views[0].mask_mode
    encoder = load_encoder(job.backbone_id, mask_mode, channels=job.stub_channels)

    by_instance: dict[str, list[View]] = {}
    for v in views:
        by_instance.setdefault(v.instance_id, []).append(v)
    instances = {i.instance_id: i for i in manifest.instances}

    records: list[tuple[str, np.ndarray]] = []
    pending: list[tuple[str, np.ndarray, np.ndarray | None]] = []

    def flush():
        if not pending:
            return
        feats = encoder.encode_batch([(p, a) for _, p, a in pending])
        for (key, _, _), vec in zip(pending, feats):
            records.append((key, vec))
        pending.clear()

    for instance_id, inst_views in by_instance.items():
        inst = instances.get(instance_id)
        if inst is None:
            raise UsageError(
                f"views file references {instance_id!r} absent from the manifest")
        image = _load_image(_resolve_image(inst.image_path, job.images_root))
        needs_mask = any(v.mask_mode == "instance" for v in inst_views)
        mask = inst.mask() if needs_mask else None
        for v in inst_views:
            patch, alpha = render_view(image, mask, v, job.input_size)
            pending.append((v.key, patch, alpha))
            if len(pending) >= job.batch_size:
                flush()
    flush()

    count = write_mve(job.output_path, records, encoder.channels, encoder.tag)

    written = {key for key, _ in records}
    missing: dict[str, list[int]] = {}
    for v in views:
        if v.key not in written:
            missing.setdefault(v.instance_id, []).append(v.view_id)
    coverage = {
        "dataset": manifest.dataset,
        "backbone_tag": encoder.tag,
        "instances": len(by_instance),
        "views_expected": len(views),
        "views_written": count,
        "missing": {k: sorted(v) for k, v in sorted(missing.items())},
    }
    coverage_path = Path(str(job.output_path) + ".coverage.json")
    coverage_path.write_text(
        json.dumps(coverage, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return ExportResult(
        output_path=Path(job.output_path),
        coverage_path=coverage_path,
        records=count,
        channels=encoder.channels,
        backbone_tag=encoder.tag,
        missing=coverage["missing"],
    )
