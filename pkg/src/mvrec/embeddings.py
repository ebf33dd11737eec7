"""Embedding interchange and the feature store.

Binary MVE1 layout (all integers little-endian u32, floats little-endian
f32):

    magic   4 bytes  "MVE1"
    version u32      currently 1
    C       u32      channels per embedding
    count   u32      record count
    tag_len u32 + bytes   UTF-8 backbone tag ("synthetic/...", "ViT-L/14", ...)
    records count times:
        key_len u32 + bytes   UTF-8 key "instance_id/view_id"
        C f32                 embedding values

Keys split on the last "/" (instance ids may contain slashes). A loaded
store maps instance_id to its view block plus the averaged feature; feature
averaging happens here, in raw embedding space by default, so exactly one
place owns that semantics.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .dataset import DatasetManifest
from .errors import ChannelMismatch, CorruptFile, MissingViews
from .geometry import ViewSpec, expected_view_keys
from .numerics import normalize_rows

MVE_MAGIC = b"MVE1"
MVE_VERSION = 1


@dataclass(frozen=True)
class MvrecEmbedding:
    instance_id: str
    views: np.ndarray  # (V, C) float64, ordered by view_id
    feature: np.ndarray  # (C,) float64, arithmetic mean of views
    backbone_tag: str

    @property
    def channels(self) -> int:
        return int(self.views.shape[1])

    @property
    def num_views(self) -> int:
        return int(self.views.shape[0])


EmbeddingStore = dict[str, MvrecEmbedding]


# ---------------------------------------------------------------------------
# binary writer / reader


def write_embedding_file(
    path: str | Path,
    records: Iterable[tuple[str, np.ndarray]],
    channels: int,
    backbone_tag: str,
) -> int:
    """records: (key "instance_id/view_id", vector length C); returns count."""
    recs = list(records)
    tag = backbone_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MVE_MAGIC)
        fh.write(struct.pack("<III", MVE_VERSION, channels, len(recs)))
        fh.write(struct.pack("<I", len(tag)))
        fh.write(tag)
        for key, vec in recs:
            vec = np.asarray(vec, dtype="<f4").ravel()
            if vec.size != channels:
                raise ChannelMismatch(
                    f"record {key!r} has {vec.size} channels, file declares {channels}")
            kb = key.encode("utf-8")
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(vec.tobytes())
    return len(recs)


def read_embedding_file(path: str | Path) -> tuple[dict[str, np.ndarray], int, str]:
    """Raw parse: key -> float32 vector (as float64 array), channels, tag."""
    data = Path(path).read_bytes()
    pos = 0

    def need(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CorruptFile(f"truncated while reading {what}", offset=pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if need(4, "magic") != MVE_MAGIC:
        raise CorruptFile("bad magic, not an MVE1 file", offset=0)
    version, channels, count = struct.unpack("<III", need(12, "header"))
    if version != MVE_VERSION:
        raise CorruptFile(f"unsupported version {version}", offset=4)
    (tag_len,) = struct.unpack("<I", need(4, "tag length"))
    try:
        tag = need(tag_len, "backbone tag").decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorruptFile(f"undecodable backbone tag: {e}", offset=pos) from e

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        rec_at = pos
        (key_len,) = struct.unpack("<I", need(4, f"key length of record {i}"))
        try:
            key = need(key_len, f"key of record {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptFile(f"undecodable key in record {i}: {e}", offset=rec_at) from e
        payload = need(4 * channels, f"values of record {i} ({key!r})")
        if key in out:
            raise CorruptFile(f"duplicate key {key!r}", offset=rec_at)
        out[key] = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if pos != len(data):
        raise CorruptFile(f"{len(data) - pos} trailing bytes after last record", offset=pos)
    return out, channels, tag


def split_key(key: str) -> tuple[str, int]:
    instance_id, _, view_part = key.rpartition("/")
    if not instance_id:
        raise CorruptFile(f"key {key!r} has no '/' separator")
    try:
        return instance_id, int(view_part)
    except ValueError:
        raise CorruptFile(f"key {key!r} has non-integer view id {view_part!r}") from None


# ---------------------------------------------------------------------------
# loading with coverage validation


def load_embeddings(
    path: str | Path,
    views: list[ViewSpec],
    expected_channels: int | None = None,
    normalize_before_average: bool = False,
) -> EmbeddingStore:
    """Load an MVE1 file and validate it against the views file contents.

    Every instance in the views list must be fully covered; otherwise a
    MissingViews error carries a per-instance report of absent view ids.
    Keys not predicted by the views list mean the file belongs to a
    different views file and are rejected as corrupt.
    """
    raw, channels, tag = read_embedding_file(path)
    if expected_channels is not None and channels != expected_channels:
        raise ChannelMismatch(f"file has C={channels}, expected C={expected_channels}")

    expected = expected_view_keys(views)
    parsed: dict[str, dict[int, np.ndarray]] = {}
    for key, vec in raw.items():
        instance_id, view_id = split_key(key)
        if instance_id not in expected:
            raise CorruptFile(f"key {key!r} references an instance not in the views file")
        parsed.setdefault(instance_id, {})[view_id] = vec

    missing: dict[str, list[str]] = {}
    for instance_id, want in expected.items():
        have = parsed.get(instance_id, {})
        absent = [str(v) for v in want if v not in have]
        extra = [v for v in have if v not in set(want)]
        if extra:
            raise CorruptFile(
                f"instance {instance_id!r} has view ids {sorted(extra)} "
                f"not in the views file")
        if absent:
            missing[instance_id] = absent
    if missing:
        n_missing = sum(len(v) for v in missing.values())
        raise MissingViews(
            f"{len(missing)} instances missing {n_missing} views "
            f"(first: {sorted(missing)[0]})",
            report=missing,
        )

    store: EmbeddingStore = {}
    for instance_id, want in expected.items():
        block = np.stack([parsed[instance_id][v] for v in want])
        if normalize_before_average:
            block, _ = normalize_rows(block)
        store[instance_id] = MvrecEmbedding(
            instance_id=instance_id,
            views=block,
            feature=block.mean(axis=0),
            backbone_tag=tag,
        )
    return store


def store_from_views(
    view_vectors: Mapping[str, np.ndarray],
    backbone_tag: str,
    normalize_before_average: bool = False,
) -> EmbeddingStore:
    """Build a store from in-memory instance_id -> (V, C) arrays."""
    store: EmbeddingStore = {}
    for instance_id, block in view_vectors.items():
        block = np.asarray(block, dtype=np.float64)
        if normalize_before_average:
            block, _ = normalize_rows(block)
        store[instance_id] = MvrecEmbedding(
            instance_id=instance_id,
            views=block,
            feature=block.mean(axis=0),
            backbone_tag=backbone_tag,
        )
    return store


# ---------------------------------------------------------------------------
# synthetic backend


def synthetic_class_centers(
    n_classes: int, channels: int, seed: int, orthogonal: bool = True
) -> np.ndarray:
    """Unit-norm class centers; orthonormal when channels allow it."""
    rng = np.random.default_rng(seed)
    if orthogonal and channels >= n_classes:
        g = rng.normal(size=(channels, channels))
        q, _ = np.linalg.qr(g)
        return q[:n_classes, :]
    centers = rng.normal(size=(n_classes, channels))
    centers, _ = normalize_rows(centers)
    return centers


def synthetic_backend(
    manifest: DatasetManifest,
    num_views: int,
    channels: int = 32,
    sigma_view: float = 0.2,
    sigma_inst: float = 0.05,
    seed: int = 0,
    orthogonal_centers: bool = True,
    normalize_before_average: bool = False,
) -> EmbeddingStore:
    """Deterministic stand-in for a real backbone.

    Each view = unit-normalized(center[class] + instance offset + view
    noise); views of one instance cluster around a common direction, so
    averaging more views cancels more per-view noise.
    """
    if sigma_view < 0 or sigma_inst < 0:
        raise ValueError("noise levels must be >= 0")
    centers = synthetic_class_centers(
        len(manifest.classes), channels, seed, orthogonal_centers)
    class_index = {c: i for i, c in enumerate(manifest.classes)}
    rng = np.random.default_rng(seed + 1)

    blocks: dict[str, np.ndarray] = {}
    for inst in manifest.instances:
        center = centers[class_index[inst.class_label]]
        inst_offset = rng.normal(size=channels) * sigma_inst
        views = center + inst_offset + rng.normal(size=(num_views, channels)) * sigma_view
        norms = np.linalg.norm(views, axis=1, keepdims=True)
        norms[norms < 1e-9] = 1.0
        blocks[inst.instance_id] = views / norms
    tag = (f"synthetic/C={channels},views={num_views},"
           f"sv={sigma_view},si={sigma_inst},seed={seed}")
    return store_from_views(blocks, tag, normalize_before_average)


def write_store(path: str | Path, store: EmbeddingStore, backbone_tag: str | None = None) -> int:
    """Serialize a store's per-view embeddings back to MVE1 (float32)."""
    items = sorted(store.items())
    if not items:
        raise ValueError("refusing to write an empty embedding file")
    channels = items[0][1].channels
    tag = backbone_tag if backbone_tag is not None else items[0][1].backbone_tag
    records = [
        (f"{iid}/{v}", emb.views[v])
        for iid, emb in items
        for v in range(emb.num_views)
    ]
    return write_embedding_file(path, records, channels, tag)


# ---------------------------------------------------------------------------
# feature export


def export_features_csv(
    store: EmbeddingStore,
    labels: Mapping[str, str],
    path: str | Path,
) -> int:
    """One row per instance: instance_id, class, C feature columns.

    Floats use repr (shortest round-trip form); rows sorted by instance id.
    """
    items = sorted(store.items())
    if not items:
        raise ValueError("empty store, nothing to export")
    channels = items[0][1].channels
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "class"] + [f"f{i}" for i in range(channels)])
        for iid, emb in items:
            writer.writerow(
                [iid, labels.get(iid, "")] + [repr(float(v)) for v in emb.feature])
    return len(items)


def features_matrix(store: EmbeddingStore, instance_ids: Iterable[str]) -> np.ndarray:
    """Stack averaged features for the given ids, order preserved."""
    return np.stack([store[iid].feature for iid in instance_ids])
