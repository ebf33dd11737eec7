"""Instance-level dataset manifests.

Image-level defect masks are split into per-instance masks via connected
components; each instance gets a class label, a run-length-encoded mask, and
a deterministic train/test split assignment (50/50 per defect type). Box
datasets enter through a JSONL annotation file, one box per line, with the
box rendered as a filled rectangular mask so everything downstream sees one
instance type.

RLE format (bit-exact contract): row-major scan of the binary mask,
alternating run lengths starting with a zero run (possibly of length 0),
decimal ASCII, single spaces.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    EmptyInstance,
    InsufficientShots,
    MissingMask,
    UnknownClass,
)

MANIFEST_FORMAT = "mvrec-manifest/1"

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


# ---------------------------------------------------------------------------
# run-length encoding


def encode_rle(mask: np.ndarray) -> str:
    flat = (np.asarray(mask).ravel() != 0).astype(np.int8)
    if flat.size == 0:
        return ""
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0] == 1:
        # leading zero-run of length 0 keeps the even/odd parity convention
        runs = np.concatenate(([0], runs))
    return " ".join(str(int(r)) for r in runs)


def decode_rle(rle: str, shape: tuple[int, int]) -> np.ndarray:
    total = int(shape[0]) * int(shape[1])
    flat = np.zeros(total, dtype=bool)
    tokens = rle.split()
    if tokens:
        runs = np.array([int(t) for t in tokens], dtype=np.int64)
        if np.any(runs < 0):
            raise ValueError("negative run length")
        ends = np.cumsum(runs)
        if ends[-1] != total:
            raise ValueError(f"RLE covers {int(ends[-1])} pixels, mask has {total}")
        starts = np.concatenate(([0], ends[:-1]))
        for i in range(1, len(runs), 2):
            flat[starts[i]:ends[i]] = True
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# connected components


@dataclass(frozen=True)
class Component:
    label: int
    area: int
    bbox: tuple[int, int, int, int]  # x, y, w, h (tight)
    centroid: tuple[float, float]  # (row, col), unrounded


def connected_components(
    mask: np.ndarray, connectivity: int = 8
) -> tuple[np.ndarray, list[Component]]:
    """Label a binary mask; components are numbered 1..n in raster-scan
    order of their first pixel regardless of the library's internal order."""
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask) != 0
    struct = _STRUCT_8 if connectivity == 8 else _STRUCT_4
    labeled, n = ndimage.label(mask, structure=struct)
    labeled = labeled.astype(np.int32)
    if n == 0:
        return labeled, []

    flat = labeled.ravel()
    fg = np.flatnonzero(flat)
    lbls = flat[fg]
    # first occurrence index of each label, then labels ordered by it
    _, first = np.unique(lbls, return_index=True)
    scan_order = lbls[np.sort(first)]
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[scan_order] = np.arange(1, n + 1, dtype=np.int32)
    labeled = remap[labeled]

    comps: list[Component] = []
    objects = ndimage.find_objects(labeled)
    for i, sl in enumerate(objects, start=1):
        sub = labeled[sl] == i
        rows, cols = np.nonzero(sub)
        area = int(rows.size)
        y0, x0 = sl[0].start, sl[1].start
        comps.append(
            Component(
                label=i,
                area=area,
                bbox=(x0, y0, sl[1].stop - x0, sl[0].stop - y0),
                centroid=(float(rows.mean()) + y0, float(cols.mean()) + x0),
            )
        )
    return labeled, comps


# ---------------------------------------------------------------------------
# instances and manifests


@dataclass(frozen=True)
class DefectInstance:
    instance_id: str
    image_path: str
    class_label: str
    image_size: tuple[int, int]  # (height, width); needed to decode the RLE
    mask_rle: str
    bbox: tuple[int, int, int, int]  # x, y, w, h
    area: int
    split: str = "unassigned"  # train | test | unassigned

    def mask(self) -> np.ndarray:
        return decode_rle(self.mask_rle, self.image_size)

    def centroid(self) -> tuple[float, float]:
        """Mask centroid in (row, col); raises on empty masks."""
        if self.area <= 0:
            raise EmptyInstance(f"instance {self.instance_id} has zero-area mask")
        rows, cols = np.nonzero(self.mask())
        if rows.size == 0:
            raise EmptyInstance(f"instance {self.instance_id} decoded to empty mask")
        return float(rows.mean()), float(cols.mean())


@dataclass
class DatasetManifest:
    dataset_name: str
    classes: list[str]
    instances: list[DefectInstance]

    def by_class(self, class_label: str, split: str | None = None) -> list[DefectInstance]:
        if class_label not in self.classes:
            raise UnknownClass(f"class {class_label!r} not in manifest {self.dataset_name!r}")
        out = [i for i in self.instances if i.class_label == class_label]
        if split is not None:
            out = [i for i in out if i.split == split]
        return out

    def counts(self) -> dict[str, dict[str, int]]:
        table: dict[str, dict[str, int]] = {
            c: {"train": 0, "test": 0} for c in self.classes}
        for inst in self.instances:
            if inst.split in ("train", "test"):
                table[inst.class_label][inst.split] += 1
        return table

    def validate(self) -> None:
        ids = [i.instance_id for i in self.instances]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate instance ids in {self.dataset_name!r}")
        known = set(self.classes)
        for inst in self.instances:
            if inst.class_label not in known:
                raise UnknownClass(
                    f"instance {inst.instance_id} has label {inst.class_label!r} "
                    f"outside the manifest class set")


def assign_splits(instances: list[DefectInstance], seed: int) -> list[DefectInstance]:
    """Per-class 50/50 split; train takes ceil(n/2). Deterministic: classes
    processed in sorted order, members in instance_id order, one shared RNG."""
    rng = random.Random(seed)
    by_class: dict[str, list[DefectInstance]] = {}
    for inst in instances:
        by_class.setdefault(inst.class_label, []).append(inst)
    assigned: dict[str, DefectInstance] = {}
    for label in sorted(by_class):
        members = sorted(by_class[label], key=lambda i: i.instance_id)
        rng.shuffle(members)
        n_train = math.ceil(len(members) / 2)
        for idx, inst in enumerate(members):
            split = "train" if idx < n_train else "test"
            assigned[inst.instance_id] = replace(inst, split=split)
    return [assigned[i.instance_id] for i in instances]


def _instances_from_mask(
    image_path: str,
    class_label: str,
    mask: np.ndarray,
    min_area: int,
    connectivity: int,
    id_prefix: str,
) -> list[DefectInstance]:
    labeled, comps = connected_components(mask, connectivity)
    h, w = labeled.shape
    out = []
    keep = [c for c in comps if c.area >= min_area]
    for k, comp in enumerate(keep):
        inst_mask = labeled == comp.label
        out.append(
            DefectInstance(
                instance_id=f"{id_prefix}/{k}",
                image_path=image_path,
                class_label=class_label,
                image_size=(h, w),
                mask_rle=encode_rle(inst_mask),
                bbox=comp.bbox,
                area=comp.area,
            )
        )
    return out


def build_manifest(
    root: str | Path,
    dataset_name: str | None = None,
    layout: str = "mvtec",
    min_area: int = 1,
    connectivity: int = 8,
    seed: int = 0,
    min_instances_per_class: int = 2,
    classes: list[str] | None = None,
) -> DatasetManifest:
    """Build a manifest from an on-disk dataset.

    layout="mvtec": root/test/<type>/NNN.png with image-level masks at
    root/ground_truth/<type>/NNN_mask.png; the 'good' folder carries no
    defects and is skipped; one instance per connected component.

    layout="bbox-jsonl": root is a JSONL file, one box per line:
    {"image": ..., "class": ..., "bbox": [x, y, w, h], "image_size": [h, w]};
    the box becomes a filled rectangular mask.

    Classes whose total instance count falls below min_instances_per_class
    are dropped (they cannot populate both splits); pass a larger threshold,
    e.g. 2 * K_max, to also enforce K-shot feasibility at build time.
    """
    root = Path(root)
    if layout == "mvtec":
        instances = _scan_mvtec(root, min_area, connectivity, classes)
        name = dataset_name or root.name
    elif layout == "bbox-jsonl":
        instances = _scan_bbox_jsonl(root, classes)
        name = dataset_name or root.stem
    else:
        raise ValueError(f"unknown layout {layout!r}")

    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.class_label] = counts.get(inst.class_label, 0) + 1
    kept_classes = sorted(c for c, n in counts.items() if n >= min_instances_per_class)
    instances = [i for i in instances if i.class_label in kept_classes]
    instances = assign_splits(instances, seed)
    manifest = DatasetManifest(dataset_name=name, classes=kept_classes, instances=instances)
    manifest.validate()
    return manifest


def _scan_mvtec(
    root: Path, min_area: int, connectivity: int, classes: list[str] | None
) -> list[DefectInstance]:
    import cv2

    test_dir = root / "test"
    gt_dir = root / "ground_truth"
    if not test_dir.is_dir():
        raise MissingMask(f"no test/ folder under {root}")
    instances: list[DefectInstance] = []
    for type_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        label = type_dir.name
        if label == "good":
            continue
        if classes is not None and label not in classes:
            raise UnknownClass(f"defect type {label!r} not in the allowed class list")
        for img_path in sorted(type_dir.iterdir()):
            if img_path.suffix.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                continue
            mask_path = gt_dir / label / f"{img_path.stem}_mask.png"
            if not mask_path.exists():
                raise MissingMask(f"no mask for defective image {img_path}")
            mask = cv2.imread(str(mask_path), cv2.IMREAD_GRAYSCALE)
            if mask is None:
                raise MissingMask(f"unreadable mask {mask_path}")
            instances.extend(
                _instances_from_mask(
                    str(img_path), label, mask > 127, min_area, connectivity,
                    id_prefix=f"{label}/{img_path.stem}",
                )
            )
    return instances


def _scan_bbox_jsonl(path: Path, classes: list[str] | None) -> list[DefectInstance]:
    if not path.is_file():
        raise MissingMask(f"annotation file {path} not found")
    instances: list[DefectInstance] = []
    per_image: dict[tuple[str, str], int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            label = rec["class"]
            if classes is not None and label not in classes:
                raise UnknownClass(f"class {label!r} at line {line_no} not allowed")
            h, w = (int(v) for v in rec["image_size"])
            x, y, bw, bh = (int(v) for v in rec["bbox"])
            if bw <= 0 or bh <= 0:
                raise EmptyInstance(f"degenerate box at line {line_no}")
            mask = np.zeros((h, w), dtype=bool)
            mask[y:y + bh, x:x + bw] = True
            stem = Path(rec["image"]).stem
            k = per_image.setdefault((label, stem), 0)
            per_image[(label, stem)] += 1
            instances.append(
                DefectInstance(
                    instance_id=f"{label}/{stem}/{k}",
                    image_path=rec["image"],
                    class_label=label,
                    image_size=(h, w),
                    mask_rle=encode_rle(mask),
                    bbox=(x, y, bw, bh),
                    area=int(mask.sum()),
                )
            )
    return instances


def make_synthetic_manifest(
    n_classes: int,
    per_class: int,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    dataset_name: str = "synthetic",
) -> DatasetManifest:
    """Small manifest with square dummy masks; pairs with the synthetic
    embedding backend for self-contained runs."""
    h, w = image_size
    rng = random.Random(seed)
    instances: list[DefectInstance] = []
    for c in range(n_classes):
        label = f"class_{c:02d}"
        for j in range(per_class):
            y = rng.randrange(0, h - 4)
            x = rng.randrange(0, w - 4)
            mask = np.zeros((h, w), dtype=bool)
            mask[y:y + 4, x:x + 4] = True
            instances.append(
                DefectInstance(
                    instance_id=f"{label}/img_{j:03d}/0",
                    image_path=f"synthetic://{label}/{j}",
                    class_label=label,
                    image_size=(h, w),
                    mask_rle=encode_rle(mask),
                    bbox=(x, y, 4, 4),
                    area=16,
                )
            )
    instances = assign_splits(instances, seed)
    manifest = DatasetManifest(
        dataset_name=dataset_name,
        classes=sorted({i.class_label for i in instances}),
        instances=instances,
    )
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    support: tuple[tuple[str, str], ...]  # (instance_id, class_label)
    query: tuple[tuple[str, str], ...]
    k: int
    n: int
    seed: int


def sample_support(manifest: DatasetManifest, k_shot: int, seed: int) -> Episode:
    """K support instances per class from the train split (seeded, classes in
    manifest order); query = the entire test split."""
    rng = random.Random(seed)
    support: list[tuple[str, str]] = []
    for label in manifest.classes:
        members = sorted(
            (i.instance_id for i in manifest.by_class(label, "train")))
        if len(members) < k_shot:
            raise InsufficientShots(
                f"class {label!r} has {len(members)} train instances, requested K={k_shot}")
        support.extend((iid, label) for iid in rng.sample(members, k_shot))
    query = tuple(
        (i.instance_id, i.class_label)
        for i in manifest.instances
        if i.split == "test"
    )
    return Episode(
        support=tuple(support),
        query=query,
        k=k_shot,
        n=len(manifest.classes),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# manifest file format (JSON, fixed key order, round-trips byte-identically)


def manifest_to_json(manifest: DatasetManifest) -> str:
    doc = {
        "format": MANIFEST_FORMAT,
        "dataset": manifest.dataset_name,
        "classes": list(manifest.classes),
        "instances": [
            {
                "instance_id": i.instance_id,
                "image_path": i.image_path,
                "class_label": i.class_label,
                "image_size": list(i.image_size),
                "bbox": list(i.bbox),
                "area": i.area,
                "split": i.split,
                "mask_rle": i.mask_rle,
            }
            for i in manifest.instances
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_json(manifest), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a manifest file: format={doc.get('format')!r}")
    instances = [
        DefectInstance(
            instance_id=r["instance_id"],
            image_path=r["image_path"],
            class_label=r["class_label"],
            image_size=(int(r["image_size"][0]), int(r["image_size"][1])),
            mask_rle=r["mask_rle"],
            bbox=tuple(int(v) for v in r["bbox"]),
            area=int(r["area"]),
            split=r["split"],
        )
        for r in doc["instances"]
    ]
    manifest = DatasetManifest(
        dataset_name=doc["dataset"], classes=list(doc["classes"]), instances=instances)
    manifest.validate()
    return manifest
