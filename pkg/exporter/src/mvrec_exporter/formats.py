"""Readers/writers for the interchange files.

These mirror the consumer package's documented formats without importing it:
manifest JSON (with row-major RLE masks), views JSONL, and the MVE1 binary
embedding container. MVE1 layout: magic "MVE1", u32 version, u32 channels,
u32 record count, u32 tag length + backbone tag (UTF-8), then per record a
u32 key length, the key "instance_id/view_id" (UTF-8), and channels float32
values, everything little-endian.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import KeyCollision, UsageError

MANIFEST_FORMAT = "mvrec-manifest/1"
VIEWS_FORMAT = "mvrec-views/1"
MVE_MAGIC = b"MVE1"
MVE_VERSION = 1


def decode_rle(rle: str, shape: tuple[int, int]) -> np.ndarray:
    """Alternating run lengths starting with zeros, row-major, decimal."""
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


@dataclass(frozen=True)
class Instance:
    instance_id: str
    image_path: str
    class_label: str
    image_size: tuple[int, int]  # (height, width)
    mask_rle: str
    bbox: tuple[int, int, int, int]
    area: int
    split: str

    def mask(self) -> np.ndarray:
        return decode_rle(self.mask_rle, self.image_size)

    def centroid(self) -> tuple[float, float]:
        rows, cols = np.nonzero(self.mask())
        if rows.size == 0:
            raise UsageError(f"instance {self.instance_id} has an empty mask")
        return float(rows.mean()), float(cols.mean())


@dataclass(frozen=True)
class Manifest:
    dataset: str
    classes: tuple[str, ...]
    instances: tuple[Instance, ...]


def read_manifest(path: str | Path) -> Manifest:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MANIFEST_FORMAT:
        raise UsageError(f"not a manifest file: format={doc.get('format')!r}")
    instances = tuple(
        Instance(
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
    )
    return Manifest(dataset=doc["dataset"], classes=tuple(doc["classes"]),
                    instances=instances)


@dataclass(frozen=True)
class View:
    instance_id: str
    view_id: int
    crop: tuple[int, int, int, int]  # x, y, w, h
    scale_index: int
    offset_index: int
    rotation: int
    flip: str
    mask_mode: str

    @property
    def key(self) -> str:
        return f"{self.instance_id}/{self.view_id}"


def read_views(path: str | Path) -> tuple[dict, list[View]]:
    """Returns (augment config dict from the header, views in file order)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != VIEWS_FORMAT:
            raise UsageError(f"not a views file: format={header.get('format')!r}")
        views = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            r = json.loads(line)
            views.append(View(
                instance_id=r["instance_id"],
                view_id=int(r["view_id"]),
                crop=tuple(int(v) for v in r["crop"]),
                scale_index=int(r["scale_index"]),
                offset_index=int(r["offset_index"]),
                rotation=int(r["rotation"]),
                flip=r["flip"],
                mask_mode=r["mask_mode"],
            ))
    return header["config"], views


def write_mve(
    path: str | Path,
    records: list[tuple[str, np.ndarray]],
    channels: int,
    backbone_tag: str,
) -> int:
    """Single-threaded append into a temp file, then one atomic rename."""
    seen = set()
    for key, _ in records:
        if key in seen:
            raise KeyCollision(f"duplicate record key {key!r}")
        seen.add(key)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tag = backbone_tag.encode("utf-8")
    with open(tmp, "wb") as fh:
        fh.write(MVE_MAGIC)
        fh.write(struct.pack("<III", MVE_VERSION, channels, len(records)))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        for key, vec in records:
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (channels,):
                raise UsageError(
                    f"record {key!r} has shape {vec.shape}, expected ({channels},)")
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(vec.astype("<f4").tobytes())
    os.replace(tmp, path)
    return len(records)


def read_mve(path: str | Path) -> tuple[dict[str, np.ndarray], int, str]:
    """Inverse of write_mve; values come back as float32."""
    blob = Path(path).read_bytes()
    if blob[:4] != MVE_MAGIC:
        raise UsageError(f"bad magic {blob[:4]!r}")
    version, channels, count = struct.unpack_from("<III", blob, 4)
    if version != MVE_VERSION:
        raise UsageError(f"unsupported version {version}")
    (tag_len,) = struct.unpack_from("<I", blob, 16)
    offset = 20
    tag = blob[offset:offset + tag_len].decode("utf-8")
    offset += tag_len
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (key_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        key = blob[offset:offset + key_len].decode("utf-8")
        offset += key_len
        vec = np.frombuffer(blob, dtype="<f4", count=channels, offset=offset).copy()
        offset += 4 * channels
        if key in out:
            raise KeyCollision(f"duplicate record key {key!r}")
        out[key] = vec
    if offset != len(blob):
        raise UsageError(f"{len(blob) - offset} trailing bytes")
    return out, channels, tag
