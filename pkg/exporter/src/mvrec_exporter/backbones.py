"""Image encoders.

Two families: a deterministic stub for tests and dry runs (no weights, no
torch), and real pretrained encoders loaded strictly from local weights.
Alpha masks are passed to the encoder as binary {0, 1} maps; that
normalization choice is recorded in the backbone tag so downstream files
are self-describing.
"""

from __future__ import annotations

import hashlib
import os
import re
from pathlib import Path

import numpy as np

from .errors import ModelLoadError

WEIGHTS_ENV = "MVREC_EXPORTER_WEIGHTS"


class StubEncoder:
    """Hash-seeded unit vectors: deterministic, content-sensitive, fast.

    Not a semantic model; it exists so the full export path (render, batch,
    serialize, validate) can run anywhere byte-reproducibly.
    """

    def __init__(self, channels: int = 32, alpha_mode: str = "binary"):
        self.channels = channels
        self.alpha_mode = alpha_mode
        self.tag = f"stub-{channels}/alpha={alpha_mode}"

    def encode_batch(
        self, patches: list[tuple[np.ndarray, np.ndarray | None]]
    ) -> np.ndarray:
        out = np.empty((len(patches), self.channels), dtype=np.float32)
        for i, (patch, alpha) in enumerate(patches):
            digest = hashlib.blake2b(digest_size=8)
            digest.update(patch.tobytes())
            if alpha is not None:
                digest.update(alpha.tobytes())
            seed = int.from_bytes(digest.digest(), "little")
            vec = np.random.default_rng(seed).standard_normal(self.channels)
            out[i] = (vec / np.linalg.norm(vec)).astype(np.float32)
        return out


class ClipVisionEncoder:
    """Plain CLIP vision tower via transformers, local weights only.

    The alpha map is not consumed (this is the no-mask ablation encoder);
    the tag records that so results are not misread as mask-prompted.
    """

    def __init__(self, weights_dir: Path, backbone_id: str):
        try:
            import torch
            from transformers import CLIPImageProcessor, CLIPVisionModelWithProjection
        except ImportError as exc:
            raise ModelLoadError(
                f"backbone {backbone_id!r} needs torch+transformers: {exc}")
        try:
            self._torch = torch
            self.model = CLIPVisionModelWithProjection.from_pretrained(
                str(weights_dir), local_files_only=True)
            self.processor = CLIPImageProcessor.from_pretrained(
                str(weights_dir), local_files_only=True)
        except Exception as exc:
            raise ModelLoadError(
                f"cannot load {backbone_id!r} from {weights_dir}: {exc}")
        self.model.eval()
        self.channels = int(self.model.config.projection_dim)
        self.tag = f"{backbone_id}/alpha=none"

    def encode_batch(self, patches):
        torch = self._torch
        images = [p for p, _ in patches]
        inputs = self.processor(images=images, return_tensors="pt")
        with torch.no_grad():
            feats = self.model(**inputs).image_embeds
        return feats.cpu().numpy().astype(np.float32)


def load_encoder(backbone_id: str, mask_mode: str, channels: int = 32):
    """Resolve a backbone id to an encoder instance.

    "stub" / "stub-<C>" never touch disk. Anything else requires local
    weights under $MVREC_EXPORTER_WEIGHTS/<id with slashes replaced by
    dashes>; mask-prompted encoding additionally requires an alpha-aware
    model, which is not bundled.
    """
    match = re.fullmatch(r"stub(?:-(\d+))?", backbone_id)
    if match:
        c = int(match.group(1)) if match.group(1) else channels
        alpha_mode = "none" if mask_mode == "none" else "binary"
        return StubEncoder(channels=c, alpha_mode=alpha_mode)

    root = os.environ.get(WEIGHTS_ENV)
    if not root:
        raise ModelLoadError(
            f"backbone {backbone_id!r} needs local weights; set {WEIGHTS_ENV} "
            f"to a directory of model snapshots or use a stub backbone")
    weights_dir = Path(root) / backbone_id.replace("/", "-")
    if not weights_dir.is_dir():
        raise ModelLoadError(f"no weights for {backbone_id!r} at {weights_dir}")
    if mask_mode != "none":
        raise ModelLoadError(
            f"backbone {backbone_id!r} has no alpha-aware weights here; "
            f"export with mask_mode='none' or install an alpha-capable model")
    return ClipVisionEncoder(weights_dir, backbone_id)
