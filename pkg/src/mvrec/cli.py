"""Command-line entry point.

Subcommands cover the batch pipeline: dataset-build (images -> manifest),
views (manifest -> view specs), embed-validate (check an embedding file
against its views), eval (episodic evaluation -> reports), and
export-features (averaged features -> CSV).

Every flag can also come from a JSON config file (``--config``); explicit
flags win, unknown config keys are rejected. All outputs are deterministic:
rerunning a subcommand on identical inputs produces byte-identical files.
Errors print a single machine-parseable line ``ErrorClass: message`` and
exit 2 for bad input or 1 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .classifiers import CLASSIFIER_NAMES, TrainConfig
from .dataset import build_manifest, load_manifest, make_synthetic_manifest, save_manifest
from .embeddings import (
    export_features_csv,
    load_embeddings,
    synthetic_backend,
)
from .errors import MissingViews, MvrecError, UsageError
from .geometry import (
    MASK_MODES,
    AugmentConfig,
    read_views_file,
    views_for_manifest,
    write_views_file,
)
from .harness import (
    ablation_suite,
    check_coverage,
    emit_report,
    report_text,
    run_experiment,
    synthetic_ablation_stores,
    trainable_flags_suite,
    write_config_echo,
)

PROG = "mvrec"


@dataclass(frozen=True)
class Flag:
    """One CLI option; also the schema for the JSON config file."""

    name: str  # underscore form; the flag is --name-with-dashes
    kind: str  # str,int,float,bool,csv_str,csv_int,csv_float,multi_str
    default: object = None
    help: str = ""
    required: bool = False
    choices: tuple = ()


def _coerce(value, flag: Flag):
    """Normalize a raw CLI string or config-file value to the flag's type."""
    kind = flag.kind
    try:
        if kind == "str":
            return str(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            raise ValueError("expected true/false")
        if kind == "csv_str":
            items = value if isinstance(value, list) else str(value).split(",")
            return [str(v).strip() for v in items if str(v).strip()]
        if kind == "csv_int":
            items = value if isinstance(value, list) else str(value).split(",")
            return [int(v) for v in items]
        if kind == "csv_float":
            items = value if isinstance(value, list) else str(value).split(",")
            return [float(v) for v in items]
        if kind == "multi_str":
            items = value if isinstance(value, list) else [value]
            return [str(v) for v in items]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for --{flag.name.replace('_', '-')}: {exc}")
    raise AssertionError(f"unhandled flag kind {kind}")


def _add_flags(parser: argparse.ArgumentParser, flags: Sequence[Flag]) -> None:
    for f in flags:
        opt = "--" + f.name.replace("_", "-")
        if f.kind == "bool":
            parser.add_argument(opt, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction, help=f.help)
        elif f.kind == "multi_str":
            parser.add_argument(opt, dest=f.name, default=None,
                                action="append", help=f.help + " (repeatable)")
        else:
            parser.add_argument(opt, dest=f.name, default=None, help=f.help)


def _resolve(ns: argparse.Namespace, flags: Sequence[Flag]) -> dict:
    """Merge CLI values over the config file over declared defaults."""
    cfg = {}
    if ns.config is not None:
        try:
            cfg = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}")
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = {f.name for f in flags}
        unknown = sorted(set(cfg) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")

    out = {}
    for f in flags:
        value = getattr(ns, f.name)
        if value is None and f.name in cfg:
            value = cfg[f.name]
        if value is None:
            value = f.default
        if value is None:
            if f.required:
                raise UsageError(f"missing required flag --{f.name.replace('_', '-')}")
            out[f.name] = None
            continue
        value = _coerce(value, f)
        if f.choices and value not in f.choices:
            raise UsageError(
                f"--{f.name.replace('_', '-')} must be one of {', '.join(map(str, f.choices))}")
        out[f.name] = value
    return out


# ---------------------------------------------------------------------------
# flag tables

_THREADS = Flag("threads", "int", os.cpu_count() or 1, "worker pool size")

DATASET_BUILD_FLAGS = (
    Flag("root", "str", help="dataset root directory", required=True),
    Flag("out", "str", help="output manifest path", required=True),
    Flag("layout", "str", "mvtec", "directory layout", choices=("mvtec", "bbox-jsonl")),
    Flag("name", "str", None, "dataset name (default: root directory name)"),
    Flag("seed", "int", 0, "split assignment seed"),
    Flag("min_area", "int", 1, "drop components smaller than this many pixels"),
    Flag("connectivity", "int", 8, "component connectivity", choices=(4, 8)),
    Flag("min_instances_per_class", "int", 2, "drop classes with fewer instances"),
    Flag("classes", "csv_str", None, "restrict to these class names"),
)

AUGMENT_FLAGS = (
    Flag("num_scale", "int", 3, "number of crop scales"),
    Flag("num_offset", "int", 9, "number of crop offsets (1 or 9)"),
    Flag("scale_factors", "csv_float", [1.0, 1.5, 2.0], "one factor per scale"),
    Flag("offset_fraction", "float", 0.125, "offset step as a fraction of crop side"),
    Flag("base_crop_fraction", "float", 1.0 / 3.0, "base crop side relative to image"),
    Flag("enable_rotation", "bool", False, "add 90-degree rotation views"),
    Flag("enable_flip", "bool", False, "add horizontal flip views"),
    Flag("mask_mode", "str", "instance", "alpha channel content", choices=MASK_MODES),
)

VIEWS_FLAGS = (
    Flag("manifest", "str", help="input manifest path", required=True),
    Flag("out", "str", help="output views file path", required=True),
) + AUGMENT_FLAGS

EMBED_VALIDATE_FLAGS = (
    Flag("embeddings", "str", help="embedding file to validate", required=True),
    Flag("views", "str", help="views file the embeddings must cover", required=True),
    Flag("manifest", "str", None, "optionally check coverage against a manifest"),
    Flag("channels", "int", None, "expected embedding width"),
    Flag("normalize_before_average", "bool", False,
         "L2-normalize each view before averaging"),
    Flag("missing_report", "str", None,
         "where to write the per-instance missing-view report on failure"),
)

TRAIN_FLAGS = (
    Flag("beta", "float", 1.0, "similarity sharpness during fine-tuning"),
    Flag("margin", "float", 0.5, "triplet margin"),
    Flag("triplet_weight", "float", 4.0, "triplet term weight in the loss"),
    Flag("lr", "float", 1e-4, "AdamW learning rate"),
    Flag("iterations", "int", 500, "fine-tuning iterations"),
    Flag("train_seed", "int", 0, "fine-tuning seed"),
    Flag("adapt_cache_through_zip", "bool", True,
         "pass cached supports through the adapter during training"),
    Flag("triplet_mining", "str", "batch_hard", "triplet mining strategy",
         choices=("batch_hard", "batch_all")),
)

SYNTH_FLAGS = (
    Flag("n_classes", "int", 5, "number of synthetic defect classes"),
    Flag("per_class", "int", 12, "instances per synthetic class"),
    Flag("channels", "int", 32, "synthetic embedding width"),
    Flag("num_views", "int", 27, "synthetic views per instance"),
    Flag("sigma_view", "float", 0.2, "per-view noise scale"),
    Flag("sigma_inst", "float", 0.05, "per-instance noise scale"),
    Flag("backend_seed", "int", 0, "synthetic data seed"),
)

EVAL_FLAGS = (
    Flag("backend", "str", "files", "embedding source", choices=("files", "synthetic")),
    Flag("out_dir", "str", help="directory for reports", required=True),
    Flag("classifiers", "csv_str", list(CLASSIFIER_NAMES), "comma-separated classifier names"),
    Flag("k_list", "csv_int", [1, 3, 5], "shot counts"),
    Flag("seeds", "csv_int", [0, 1, 2, 3, 4], "episode seeds"),
    Flag("formats", "csv_str", ["json", "csv", "text"], "report formats"),
    Flag("ablation", "str", "none", "ablation axis",
         choices=("none", "flags", "augment")),
    Flag("manifest", "multi_str", None, "manifest path (files backend)"),
    Flag("views", "multi_str", None, "views file path (files backend)"),
    Flag("embeddings", "multi_str", None, "embedding file path (files backend)"),
    Flag("normalize_before_average", "bool", False,
         "L2-normalize each view before averaging"),
    _THREADS,
) + TRAIN_FLAGS + SYNTH_FLAGS

EXPORT_FLAGS = (
    Flag("backend", "str", "files", "embedding source", choices=("files", "synthetic")),
    Flag("out", "str", help="output CSV path", required=True),
    Flag("manifest", "str", None, "manifest path (files backend)"),
    Flag("views", "str", None, "views file path (files backend)"),
    Flag("embeddings", "str", None, "embedding file path (files backend)"),
    Flag("normalize_before_average", "bool", False,
         "L2-normalize each view before averaging"),
) + SYNTH_FLAGS


# ---------------------------------------------------------------------------
# subcommands


def cmd_dataset_build(opts: dict) -> int:
    manifest = build_manifest(
        opts["root"],
        dataset_name=opts["name"],
        layout=opts["layout"],
        min_area=opts["min_area"],
        connectivity=opts["connectivity"],
        seed=opts["seed"],
        min_instances_per_class=opts["min_instances_per_class"],
        classes=opts["classes"],
    )
    save_manifest(manifest, opts["out"])
    print(f"wrote {opts['out']} "
          f"({len(manifest.instances)} instances, {len(manifest.classes)} classes)")
    return 0


def _augment_config(opts: dict) -> AugmentConfig:
    return AugmentConfig(
        num_scale=opts["num_scale"],
        num_offset=opts["num_offset"],
        scale_factors=tuple(opts["scale_factors"]),
        offset_fraction=opts["offset_fraction"],
        base_crop_fraction=opts["base_crop_fraction"],
        enable_rotation=opts["enable_rotation"],
        enable_flip=opts["enable_flip"],
        mask_mode=opts["mask_mode"],
    )


def cmd_views(opts: dict) -> int:
    manifest = load_manifest(opts["manifest"])
    config = _augment_config(opts)
    specs = views_for_manifest(manifest, config)
    write_views_file(opts["out"], specs, config)
    print(f"wrote {opts['out']} "
          f"({len(specs)} views, {config.views_per_instance} per instance)")
    return 0


def cmd_embed_validate(opts: dict) -> int:
    _, specs = read_views_file(opts["views"])
    try:
        store = load_embeddings(
            opts["embeddings"], specs,
            expected_channels=opts["channels"],
            normalize_before_average=opts["normalize_before_average"])
    except MissingViews as err:
        if opts["missing_report"]:
            Path(opts["missing_report"]).write_text(
                json.dumps(err.report, indent=1, sort_keys=True) + "\n",
                encoding="utf-8")
        raise
    if opts["manifest"]:
        check_coverage(load_manifest(opts["manifest"]), store)
    if not store:
        print("ok: 0 instances")
        return 0
    sample = next(iter(store.values()))
    print(f"ok: {len(store)} instances, {sample.num_views} views each, "
          f"channels={sample.channels}, backbone={sample.backbone_tag}")
    return 0


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(
        beta=opts["beta"],
        margin=opts["margin"],
        triplet_weight=opts["triplet_weight"],
        lr=opts["lr"],
        iterations=opts["iterations"],
        seed=opts["train_seed"],
        adapt_cache_through_zip=opts["adapt_cache_through_zip"],
        triplet_mining=opts["triplet_mining"],
    )


def _load_file_datasets(opts: dict):
    manifests = opts["manifest"]
    views = opts["views"]
    embeddings = opts["embeddings"]
    if not (manifests and views and embeddings):
        raise UsageError(
            "files backend needs --manifest, --views and --embeddings")
    if not (len(manifests) == len(views) == len(embeddings)):
        raise UsageError(
            "--manifest, --views and --embeddings must repeat the same number of times")
    loaded = []
    stores = {}
    for m_path, v_path, e_path in zip(manifests, views, embeddings):
        manifest = load_manifest(m_path)
        _, specs = read_views_file(v_path)
        store = load_embeddings(
            e_path, specs,
            normalize_before_average=opts["normalize_before_average"])
        check_coverage(manifest, store)
        loaded.append(manifest)
        stores[manifest.dataset_name] = store
    return loaded, stores


def _synthetic_dataset(opts: dict):
    manifest = make_synthetic_manifest(
        opts["n_classes"], opts["per_class"], seed=opts["backend_seed"])
    store = synthetic_backend(
        manifest,
        num_views=opts["num_views"],
        channels=opts["channels"],
        sigma_view=opts["sigma_view"],
        sigma_inst=opts["sigma_inst"],
        seed=opts["backend_seed"],
        normalize_before_average=opts["normalize_before_average"],
    )
    return manifest, store


def cmd_eval(opts: dict) -> int:
    for name in opts["classifiers"]:
        if name not in CLASSIFIER_NAMES:
            raise UsageError(
                f"unknown classifier {name!r}; choose from {', '.join(CLASSIFIER_NAMES)}")
    train_config = _train_config(opts)
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if opts["backend"] == "synthetic":
        manifest, store = _synthetic_dataset(opts)
        if opts["ablation"] == "augment":
            stores = synthetic_ablation_stores(
                manifest, _default_augment(), channels=opts["channels"],
                sigma_view=opts["sigma_view"], sigma_inst=opts["sigma_inst"],
                seed=opts["backend_seed"])
            table = ablation_suite(
                manifest, stores, opts["classifiers"], opts["k_list"],
                opts["seeds"], train_config, opts["threads"])
        elif opts["ablation"] == "flags":
            table = trainable_flags_suite(
                manifest, store, opts["k_list"], opts["seeds"],
                train_config, opts["threads"])
        else:
            table = run_experiment(
                [manifest], {manifest.dataset_name: store}, opts["classifiers"],
                opts["k_list"], opts["seeds"], train_config, opts["threads"])
    else:
        if opts["ablation"] == "augment":
            raise UsageError(
                "the augmentation ablation re-embeds each view combo; "
                "it is only available with --backend synthetic")
        manifests, stores = _load_file_datasets(opts)
        if opts["ablation"] == "flags":
            table = trainable_flags_suite(
                manifests[0], stores[manifests[0].dataset_name],
                opts["k_list"], opts["seeds"], train_config, opts["threads"])
        else:
            table = run_experiment(
                manifests, stores, opts["classifiers"], opts["k_list"],
                opts["seeds"], train_config, opts["threads"])

    ext = {"json": "json", "csv": "csv", "text": "txt"}
    for fmt in opts["formats"]:
        if fmt not in ext:
            raise UsageError(f"unknown report format {fmt!r}")
        path = emit_report(table, fmt, out_dir / f"report.{ext[fmt]}")
        print(f"wrote {path}")
    echo = dict(opts)
    echo["subcommand"] = "eval"
    path = write_config_echo(out_dir / "run_config.json", echo)
    print(f"wrote {path}")
    print(report_text(table), end="")
    return 0


def _default_augment() -> AugmentConfig:
    return AugmentConfig()


def cmd_export_features(opts: dict) -> int:
    if opts["backend"] == "synthetic":
        manifest, store = _synthetic_dataset(opts)
    else:
        if not (opts["manifest"] and opts["views"] and opts["embeddings"]):
            raise UsageError(
                "files backend needs --manifest, --views and --embeddings")
        manifest = load_manifest(opts["manifest"])
        _, specs = read_views_file(opts["views"])
        store = load_embeddings(
            opts["embeddings"], specs,
            normalize_before_average=opts["normalize_before_average"])
    labels = {i.instance_id: i.class_label for i in manifest.instances}
    count = export_features_csv(store, labels, opts["out"])
    print(f"wrote {opts['out']} ({count} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser assembly

SUBCOMMANDS = (
    ("dataset-build", "scan a dataset directory into a manifest",
     DATASET_BUILD_FLAGS, cmd_dataset_build),
    ("views", "expand a manifest into multi-view crop specs",
     VIEWS_FLAGS, cmd_views),
    ("embed-validate", "check an embedding file against its views file",
     EMBED_VALIDATE_FLAGS, cmd_embed_validate),
    ("eval", "run episodic few-shot evaluation and write reports",
     EVAL_FLAGS, cmd_eval),
    ("export-features", "write averaged per-instance features as CSV",
     EXPORT_FLAGS, cmd_export_features),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Few-shot multi-view defect classification pipeline.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text, flags, func in SUBCOMMANDS:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None,
                       help="JSON file providing any of this subcommand's flags")
        _add_flags(p, flags)
        p.set_defaults(_flags=flags, _func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and bad flags
        return int(exc.code or 0)
    try:
        opts = _resolve(ns, ns._flags)
        return ns._func(opts)
    except MvrecError as err:
        print(err.one_line(), file=sys.stderr)
        return err.exit_code
    except (OSError, ValueError) as err:
        message = " ".join(str(err).split())
        print(f"{type(err).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
