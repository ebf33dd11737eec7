"""Command-line wrapper around one ExportJob."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .errors import ExporterError
from .export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvrec-export",
        description="Render multi-view crops and export backbone embeddings "
                    "to an MVE1 file.")
    parser.add_argument("--manifest", required=True, help="dataset manifest path")
    parser.add_argument("--views", required=True, help="views file path")
    parser.add_argument("--out", required=True, help="output MVE1 path")
    parser.add_argument("--images-root", default="",
                        help="base directory for relative image paths")
    parser.add_argument("--backbone", default="ViT-L/14",
                        help="backbone id; 'stub-<C>' runs without weights")
    parser.add_argument("--mask-mode", default=None,
                        choices=("instance", "full_foreground", "none"),
                        help="override the views file's mask mode")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--input-size", type=int, default=224,
                        help="square side fed to the encoder")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    job = ExportJob(
        manifest_path=ns.manifest,
        views_path=ns.views,
        output_path=ns.out,
        images_root=ns.images_root,
        backbone_id=ns.backbone,
        mask_mode_override=ns.mask_mode,
        batch_size=ns.batch_size,
        device=ns.device,
        input_size=ns.input_size,
    )
    try:
        result = export(job)
    except ExporterError as err:
        print(err.one_line(), file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"{type(err).__name__}: {' '.join(str(err).split())}", file=sys.stderr)
        return 1
    print(f"wrote {result.output_path} ({result.records} records, "
          f"C={result.channels}, backbone={result.backbone_tag})")
    print(f"wrote {result.coverage_path}")
    if result.missing:
        print(f"warning: {sum(len(v) for v in result.missing.values())} views missing",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
