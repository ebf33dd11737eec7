"""Episodic N-way K-shot evaluation.

For each (dataset, K, seed) an episode is sampled (K support instances per
class, query = the entire test split), every requested classifier is fitted
on the same support, and accuracy = correct / |query| is recorded per defect
instance. Reports aggregate per-dataset means over seeds plus an unweighted
grand average over datasets, and are byte-identical across reruns of the
same config.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .classifiers import (
    BaseClassifier,
    TrainConfig,
    ZipAdapter,
    ZipAdapterF,
    build_support_cache,
    make_classifier,
    support_view_batch,
)
from .dataset import DatasetManifest, make_synthetic_manifest, sample_support
from .embeddings import EmbeddingStore, features_matrix, synthetic_backend
from .errors import CoverageError
from .geometry import ABLATION_COMBOS, AugmentConfig

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_K_LIST = (1, 3, 5)

ClassifierSpec = "str | tuple[str, Callable[[], BaseClassifier]]"


@dataclass(frozen=True)
class ResultCell:
    dataset: str
    classifier: str
    k: int
    seed: int
    accuracy: float  # in [0, 1]
    n_query: int


@dataclass
class ResultTable:
    cells: list[ResultCell]
    datasets: list[str]
    classifiers: list[str]
    k_values: list[int]
    seeds: list[int]

    def __post_init__(self):
        self.cells = sorted(
            self.cells,
            key=lambda c: (self.datasets.index(c.dataset),
                           self.classifiers.index(c.classifier),
                           c.k, c.seed))

    def cell(self, dataset: str, classifier: str, k: int, seed: int) -> ResultCell:
        for c in self.cells:
            if (c.dataset, c.classifier, c.k, c.seed) == (dataset, classifier, k, seed):
                return c
        raise KeyError((dataset, classifier, k, seed))

    def mean_accuracy(self, dataset: str, classifier: str, k: int) -> float:
        vals = [c.accuracy for c in self.cells
                if c.dataset == dataset and c.classifier == classifier and c.k == k]
        if not vals:
            raise KeyError((dataset, classifier, k))
        return float(np.mean(vals))

    def grand_average(self, classifier: str, k: int) -> float:
        return float(np.mean(
            [self.mean_accuracy(d, classifier, k) for d in self.datasets]))


def _resolve_specs(
    classifiers: Sequence,
) -> list[tuple[str, Callable[[], BaseClassifier]]]:
    out = []
    for spec in classifiers:
        if isinstance(spec, str):
            out.append((spec, (lambda name=spec: make_classifier(name))))
        else:
            name, factory = spec
            out.append((name, factory))
    return out


def check_coverage(manifest: DatasetManifest, store: EmbeddingStore) -> None:
    missing = [i.instance_id for i in manifest.instances if i.instance_id not in store]
    if missing:
        raise CoverageError(
            f"{len(missing)} manifest instances lack embeddings "
            f"(first: {missing[0]})")


def run_experiment(
    manifests: Sequence[DatasetManifest],
    stores: Mapping[str, EmbeddingStore],
    classifiers: Sequence,
    k_list: Sequence[int] = DEFAULT_K_LIST,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    train_config: TrainConfig = TrainConfig(),
    threads: int = 1,
) -> ResultTable:
    """Evaluate every classifier on every (dataset, K, seed) episode.

    stores maps dataset_name to its embedding store. Episodes are shared
    across classifiers within a cell group, so all models see identical
    supports. Execution may be parallel; output ordering is canonical.
    """
    specs = _resolve_specs(classifiers)
    if not specs:
        raise ValueError("empty classifier list")
    for m in manifests:
        check_coverage(m, stores[m.dataset_name])

    groups = [(m, k, seed) for m in manifests for k in k_list for seed in seeds]

    def eval_group(group) -> list[ResultCell]:
        manifest, k, seed = group
        store = stores[manifest.dataset_name]
        episode = sample_support(manifest, k, seed)
        cache = build_support_cache(episode, store, manifest.classes)
        batch_x, batch_y = support_view_batch(episode, store, manifest.classes)
        queries = features_matrix(store, [iid for iid, _ in episode.query])
        class_index = {c: i for i, c in enumerate(manifest.classes)}
        labels = np.array([class_index[c] for _, c in episode.query])
        cells = []
        for name, factory in specs:
            clf = factory()
            clf.fit(cache, batch_x, batch_y, train_config)
            acc = float(np.mean(clf.predict(queries) == labels))
            cells.append(ResultCell(
                dataset=manifest.dataset_name, classifier=name, k=k,
                seed=seed, accuracy=acc, n_query=len(labels)))
        return cells

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(eval_group, groups))
    else:
        chunks = [eval_group(g) for g in groups]

    return ResultTable(
        cells=[c for chunk in chunks for c in chunk],
        datasets=[m.dataset_name for m in manifests],
        classifiers=[name for name, _ in specs],
        k_values=list(k_list),
        seeds=list(seeds),
    )


# ---------------------------------------------------------------------------
# ablation drivers


def ablation_suite(
    manifest: DatasetManifest,
    variant_stores: Mapping[str, EmbeddingStore],
    classifiers: Sequence = ("zip",),
    k_list: Sequence[int] = DEFAULT_K_LIST,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    train_config: TrainConfig = TrainConfig(),
    threads: int = 1,
) -> ResultTable:
    """Evaluate over named embedding variants (augmentation combos, mask
    modes, crop styles); the variant name takes the dataset column."""
    manifests = [
        DatasetManifest(dataset_name=name, classes=manifest.classes,
                        instances=manifest.instances)
        for name in variant_stores
    ]
    return run_experiment(
        manifests, dict(variant_stores), classifiers,
        k_list, seeds, train_config, threads)


TRAINABLE_FLAG_SETTINGS = (
    ("zip_f[frozen]", False, False),
    ("zip_f[cache]", True, False),
    ("zip_f[zip]", False, True),
    ("zip_f[cache+zip]", True, True),
)


def trainable_flags_suite(
    manifest: DatasetManifest,
    store: EmbeddingStore,
    k_list: Sequence[int] = DEFAULT_K_LIST,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    train_config: TrainConfig = TrainConfig(),
    threads: int = 1,
) -> ResultTable:
    """The four trainable-flag combinations plus the training-free row at
    the same sharpness (the frozen row must match it exactly)."""
    specs: list[tuple[str, Callable[[], BaseClassifier]]] = [
        (name, (lambda tc=tc, tz=tz: ZipAdapterF(train_cache=tc, train_zip=tz)))
        for name, tc, tz in TRAINABLE_FLAG_SETTINGS
    ]
    specs.append(("zip[matched-beta]",
                  lambda: ZipAdapter(beta=train_config.beta)))
    return run_experiment(
        [manifest], {manifest.dataset_name: store}, specs,
        k_list, seeds, train_config, threads)


def synthetic_ablation_stores(
    manifest: DatasetManifest,
    config: AugmentConfig,
    channels: int = 32,
    sigma_view: float = 0.2,
    sigma_inst: float = 0.05,
    seed: int = 0,
    combos: Sequence[str] = ABLATION_COMBOS,
) -> dict[str, EmbeddingStore]:
    """One synthetic store per augmentation combo; view count follows the
    combo's multiplicity (scale x3, offset x9, rotation x4, flip x2)."""
    counts = {}
    for name in combos:
        parts = set(name.split("+"))
        v = 1
        if "scale" in parts:
            v *= config.num_scale
        if "offset" in parts:
            v *= 9
        if "rotate" in parts:
            v *= 4
        if "flip" in parts:
            v *= 2
        counts[name] = v
    return {
        name: synthetic_backend(
            manifest, num_views=v, channels=channels,
            sigma_view=sigma_view, sigma_inst=sigma_inst, seed=seed)
        for name, v in counts.items()
    }


def synthetic_experiment(
    n_classes: int = 5,
    per_class: int = 12,
    channels: int = 32,
    num_views: int = 27,
    sigma_view: float = 0.2,
    sigma_inst: float = 0.05,
    backend_seed: int = 0,
    classifiers: Sequence = ("zip", "zip_f", "tip", "tip_f", "knn",
                             "protonet", "linearprob", "clip_adapter"),
    k_list: Sequence[int] = DEFAULT_K_LIST,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    train_config: TrainConfig = TrainConfig(),
    threads: int = 1,
    dataset_name: str = "synthetic",
) -> ResultTable:
    """Fully self-contained run: synthetic manifest + synthetic backbone."""
    manifest = make_synthetic_manifest(
        n_classes, per_class, seed=backend_seed, dataset_name=dataset_name)
    store = synthetic_backend(
        manifest, num_views=num_views, channels=channels,
        sigma_view=sigma_view, sigma_inst=sigma_inst, seed=backend_seed)
    return run_experiment(
        [manifest], {dataset_name: store}, classifiers,
        k_list, seeds, train_config, threads)


# ---------------------------------------------------------------------------
# reports

REPORT_FORMAT = "mvrec-report/1"


def _aggregate_rows(table: ResultTable):
    per_dataset = [
        {"dataset": d, "classifier": c, "k": k,
         "accuracy_percent": 100.0 * table.mean_accuracy(d, c, k)}
        for d in table.datasets
        for c in table.classifiers
        for k in table.k_values
    ]
    averages = [
        {"classifier": c, "k": k,
         "accuracy_percent": 100.0 * table.grand_average(c, k)}
        for c in table.classifiers
        for k in table.k_values
    ]
    return per_dataset, averages


def report_json(table: ResultTable) -> str:
    per_dataset, averages = _aggregate_rows(table)
    doc = {
        "format": REPORT_FORMAT,
        "datasets": table.datasets,
        "classifiers": table.classifiers,
        "k_values": table.k_values,
        "seeds": table.seeds,
        "cells": [
            {"dataset": c.dataset, "classifier": c.classifier, "k": c.k,
             "seed": c.seed, "accuracy_percent": 100.0 * c.accuracy,
             "n_query": c.n_query}
            for c in table.cells
        ],
        "per_dataset_mean": per_dataset,
        "average": averages,
    }
    return json.dumps(doc, indent=1) + "\n"


def report_csv(table: ResultTable) -> str:
    import io

    per_dataset, averages = _aggregate_rows(table)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dataset", "classifier", "k", "seed", "accuracy_percent", "n_query"])
    for c in table.cells:
        writer.writerow([c.dataset, c.classifier, c.k, c.seed,
                         repr(100.0 * c.accuracy), c.n_query])
    for row in per_dataset:
        writer.writerow([row["dataset"], row["classifier"], row["k"], "mean",
                         repr(row["accuracy_percent"]), ""])
    for row in averages:
        writer.writerow(["average", row["classifier"], row["k"], "mean",
                         repr(row["accuracy_percent"]), ""])
    return buf.getvalue()


def report_text(table: ResultTable) -> str:
    """Aligned table per K: one row per classifier, one column per dataset
    plus the unweighted average; percentages at one decimal."""
    lines = []
    col_names = table.datasets + ["Average"]
    name_w = max(len("classifier"), max(len(c) for c in table.classifiers))
    col_w = max(9, max(len(n) for n in col_names) + 2)
    for k in table.k_values:
        lines.append(f"== K={k} ==")
        header = "classifier".ljust(name_w)
        for n in col_names:
            header += n.rjust(col_w)
        lines.append(header)
        for c in table.classifiers:
            row = c.ljust(name_w)
            for d in table.datasets:
                row += f"{100.0 * table.mean_accuracy(d, c, k):.1f}".rjust(col_w)
            row += f"{100.0 * table.grand_average(c, k):.1f}".rjust(col_w)
            lines.append(row)
        lines.append("")
    return "\n".join(lines)


def emit_report(table: ResultTable, fmt: str, path: str | Path) -> Path:
    if not table.cells:
        raise ValueError("refusing to write a report for an empty table")
    renderers = {"json": report_json, "csv": report_csv, "text": report_text}
    if fmt not in renderers:
        raise ValueError(f"unknown report format {fmt!r}; choose from {sorted(renderers)}")
    path = Path(path)
    path.write_text(renderers[fmt](table), encoding="utf-8")
    return path


def write_config_echo(path: str | Path, config: dict) -> Path:
    """Reproducibility sidecar: the exact resolved configuration, stable key
    order, no volatile fields."""
    path = Path(path)
    path.write_text(json.dumps(config, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
