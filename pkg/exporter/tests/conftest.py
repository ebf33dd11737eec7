import subprocess
import sys
from types import SimpleNamespace

import cv2
import numpy as np
import pytest


def primary_cli(*args):
    """The consumer package's CLI is the only coupling point allowed here."""
    return subprocess.run(
        [sys.executable, "-m", "mvrec.cli", *args],
        capture_output=True, text=True)


def write_dataset(root, n_images=3):
    (root / "test" / "scratch").mkdir(parents=True)
    (root / "ground_truth" / "scratch").mkdir(parents=True)
    rng = np.random.default_rng(7)
    for i in range(n_images):
        img = rng.integers(0, 256, (48, 64, 3)).astype(np.uint8)
        mask = np.zeros((48, 64), dtype=np.uint8)
        y, x = 6 + 10 * i, 8 + 12 * i
        mask[y:y + 7, x:x + 9] = 255
        cv2.imwrite(str(root / "test" / "scratch" / f"{i:03d}.png"), img)
        cv2.imwrite(str(root / "ground_truth" / "scratch" / f"{i:03d}_mask.png"), mask)


@pytest.fixture
def pipeline(tmp_path):
    """3-image fixture taken through the consumer's dataset-build + views."""
    data_root = tmp_path / "data"
    data_root.mkdir()
    write_dataset(data_root)
    manifest = tmp_path / "manifest.json"
    views = tmp_path / "views.jsonl"
    built = primary_cli("dataset-build", "--root", str(data_root),
                        "--out", str(manifest))
    assert built.returncode == 0, built.stderr
    gen = primary_cli("views", "--manifest", str(manifest), "--out", str(views))
    assert gen.returncode == 0, gen.stderr
    return SimpleNamespace(
        tmp_path=tmp_path, data_root=data_root,
        manifest=manifest, views=views)
