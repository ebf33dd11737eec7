"""End-to-end export path on the 3-image fixture, stub backbone throughout."""

import json

import numpy as np
import pytest
from conftest import primary_cli

from mvrec_exporter.backbones import WEIGHTS_ENV, load_encoder
from mvrec_exporter.cli import main
from mvrec_exporter.errors import ImageMissing, KeyCollision, ModelLoadError
from mvrec_exporter.export import ExportJob, export
from mvrec_exporter.formats import read_mve


def stub_job(pipeline, out, **overrides):
    kwargs = dict(
        manifest_path=str(pipeline.manifest),
        views_path=str(pipeline.views),
        output_path=str(out),
        backbone_id="stub-16",
        input_size=64,
    )
    kwargs.update(overrides)
    return ExportJob(**kwargs)


def test_export_covers_every_view(pipeline):
    out = pipeline.tmp_path / "emb.mve"
    result = export(stub_job(pipeline, out))
    assert result.records == 3 * 27
    assert result.channels == 16
    assert result.backbone_tag == "stub-16/alpha=binary"
    assert result.missing == {}

    store, channels, tag = read_mve(out)
    assert len(store) == 81
    assert channels == 16
    assert tag == "stub-16/alpha=binary"
    for vec in store.values():
        assert vec.dtype == np.float32
        assert abs(float(np.linalg.norm(vec)) - 1.0) < 1e-5

    coverage = json.loads(result.coverage_path.read_text())
    assert coverage["views_expected"] == 81
    assert coverage["views_written"] == 81
    assert coverage["instances"] == 3
    assert coverage["missing"] == {}
    assert coverage["backbone_tag"] == "stub-16/alpha=binary"


def test_export_is_deterministic_across_batch_sizes(pipeline):
    a = pipeline.tmp_path / "a.mve"
    b = pipeline.tmp_path / "b.mve"
    export(stub_job(pipeline, a))
    export(stub_job(pipeline, b, batch_size=7))
    assert a.read_bytes() == b.read_bytes()


def test_primary_accepts_exported_file(pipeline):
    out = pipeline.tmp_path / "emb.mve"
    export(stub_job(pipeline, out))
    check = primary_cli(
        "embed-validate", "--embeddings", str(out),
        "--views", str(pipeline.views), "--manifest", str(pipeline.manifest),
        "--channels", "16")
    assert check.returncode == 0, check.stderr
    assert check.stdout.startswith("ok: 3 instances, 27 views each")
    assert "stub-16/alpha=binary" in check.stdout


def test_mask_override_changes_content_but_still_validates(pipeline):
    plain = pipeline.tmp_path / "plain.mve"
    flood = pipeline.tmp_path / "flood.mve"
    export(stub_job(pipeline, plain))
    result = export(stub_job(pipeline, flood, mask_mode_override="full_foreground"))
    assert plain.read_bytes() != flood.read_bytes()
    assert result.backbone_tag == "stub-16/alpha=binary"
    check = primary_cli("embed-validate", "--embeddings", str(flood),
                        "--views", str(pipeline.views), "--channels", "16")
    assert check.returncode == 0, check.stderr

    bare = export(stub_job(pipeline, pipeline.tmp_path / "bare.mve",
                           mask_mode_override="none"))
    assert bare.backbone_tag == "stub-16/alpha=none"


def test_missing_image_is_a_user_error(pipeline):
    doctored = json.loads(pipeline.manifest.read_text())
    doctored["instances"][0]["image_path"] = "/nonexistent/gone.png"
    bad_manifest = pipeline.tmp_path / "bad_manifest.json"
    bad_manifest.write_text(json.dumps(doctored))
    with pytest.raises(ImageMissing):
        export(stub_job(pipeline, pipeline.tmp_path / "x.mve",
                        manifest_path=str(bad_manifest)))


def test_duplicate_view_key_rejected(pipeline):
    lines = pipeline.views.read_text().splitlines()
    dup = pipeline.tmp_path / "dup_views.jsonl"
    dup.write_text("\n".join(lines + [lines[-1]]) + "\n")
    with pytest.raises(KeyCollision):
        export(stub_job(pipeline, pipeline.tmp_path / "x.mve",
                        views_path=str(dup)))


def test_real_backbone_requires_local_weights(pipeline, monkeypatch):
    monkeypatch.delenv(WEIGHTS_ENV, raising=False)
    with pytest.raises(ModelLoadError):
        load_encoder("ViT-L/14", "none")
    monkeypatch.setenv(WEIGHTS_ENV, str(pipeline.tmp_path))
    with pytest.raises(ModelLoadError):
        load_encoder("ViT-L/14", "none")
    (pipeline.tmp_path / "ViT-L-14").mkdir()
    with pytest.raises(ModelLoadError):
        load_encoder("ViT-L/14", "instance")


def test_cli_roundtrip_and_exit_codes(pipeline, capsys):
    out = pipeline.tmp_path / "cli.mve"
    code = main(["--manifest", str(pipeline.manifest),
                 "--views", str(pipeline.views),
                 "--out", str(out), "--backbone", "stub-16",
                 "--input-size", "64"])
    assert code == 0
    printed = capsys.readouterr().out
    assert str(out) in printed
    assert out.is_file() and (pipeline.tmp_path / "cli.mve.coverage.json").is_file()

    assert main(["--views", str(pipeline.views), "--out", str(out)]) == 2
    capsys.readouterr()

    code = main(["--manifest", str(pipeline.manifest),
                 "--views", str(pipeline.views),
                 "--out", str(out), "--backbone", "no-such-model"])
    assert code == 2
    err = capsys.readouterr().err
    assert err.startswith("ModelLoadError:") and "\n" not in err.strip()
