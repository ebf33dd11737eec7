import csv
import io
import json

import numpy as np
import pytest

from mvrec.classifiers import (
    TrainConfig,
    ZipAdapter,
    build_support_cache,
)
from mvrec.dataset import make_synthetic_manifest, sample_support
from mvrec.embeddings import features_matrix, synthetic_backend
from mvrec.errors import CoverageError
from mvrec.geometry import AugmentConfig
from mvrec.harness import (
    ResultCell,
    ResultTable,
    ablation_suite,
    check_coverage,
    emit_report,
    report_csv,
    report_json,
    report_text,
    run_experiment,
    synthetic_ablation_stores,
    synthetic_experiment,
    trainable_flags_suite,
    write_config_echo,
)


def easy_setup(name="synthetic", n=4, per_class=8, v=3, c=16, seed=0):
    manifest = make_synthetic_manifest(n, per_class, seed=seed, dataset_name=name)
    store = synthetic_backend(
        manifest, num_views=v, channels=c,
        sigma_view=0.1, sigma_inst=0.03, seed=seed)
    return manifest, store


def handmade_table():
    # two datasets, one classifier, one K, two seeds; accuracies chosen so
    # the aggregates are easy to verify by hand
    cells = [
        ResultCell("alpha", "zip", 1, 0, 0.80, 10),
        ResultCell("alpha", "zip", 1, 1, 0.90, 10),
        ResultCell("beta", "zip", 1, 0, 0.50, 10),
        ResultCell("beta", "zip", 1, 1, 0.60, 10),
    ]
    return ResultTable(cells, ["alpha", "beta"], ["zip"], [1], [0, 1])


def test_mean_accuracy_and_grand_average_hand_values():
    table = handmade_table()
    assert table.mean_accuracy("alpha", "zip", 1) == pytest.approx(0.85)
    assert table.mean_accuracy("beta", "zip", 1) == pytest.approx(0.55)
    assert table.grand_average("zip", 1) == pytest.approx(0.70)


def test_grand_average_is_unweighted_over_datasets():
    # beta has 10x the queries of alpha; the average must ignore that
    cells = [
        ResultCell("alpha", "zip", 1, 0, 1.0, 2),
        ResultCell("beta", "zip", 1, 0, 0.0, 20),
    ]
    table = ResultTable(cells, ["alpha", "beta"], ["zip"], [1], [0])
    assert table.grand_average("zip", 1) == pytest.approx(0.5)


def test_cells_sorted_canonically():
    cells = [
        ResultCell("beta", "zip", 1, 1, 0.5, 4),
        ResultCell("alpha", "zip", 3, 0, 0.5, 4),
        ResultCell("alpha", "zip", 1, 0, 0.5, 4),
        ResultCell("beta", "zip", 1, 0, 0.5, 4),
    ]
    table = ResultTable(cells, ["alpha", "beta"], ["zip"], [1, 3], [0, 1])
    keys = [(c.dataset, c.k, c.seed) for c in table.cells]
    assert keys == [("alpha", 1, 0), ("alpha", 3, 0), ("beta", 1, 0), ("beta", 1, 1)]


def test_run_experiment_cell_matches_manual_evaluation():
    manifest, store = easy_setup()
    table = run_experiment(
        [manifest], {manifest.dataset_name: store}, ["zip"],
        k_list=(2,), seeds=(0, 1))

    episode = sample_support(manifest, 2, 1)
    cache = build_support_cache(episode, store, manifest.classes)
    clf = ZipAdapter()
    clf.fit(cache, None, None, TrainConfig())
    queries = features_matrix(store, [iid for iid, _ in episode.query])
    index = {c: i for i, c in enumerate(manifest.classes)}
    labels = np.array([index[c] for _, c in episode.query])
    expected = float(np.mean(clf.predict(queries) == labels))

    assert table.cell(manifest.dataset_name, "zip", 2, 1).accuracy == expected
    assert table.cell(manifest.dataset_name, "zip", 2, 1).n_query == len(labels)


def test_run_experiment_easy_regime_all_correct():
    manifest, store = easy_setup()
    table = run_experiment(
        [manifest], {manifest.dataset_name: store}, ["zip", "knn", "protonet"],
        k_list=(3,), seeds=(0, 1, 2))
    for cell in table.cells:
        assert cell.accuracy == 1.0


def test_run_experiment_threads_match_serial():
    manifest, store = easy_setup(per_class=6, v=2)
    kwargs = dict(k_list=(1, 2), seeds=(0, 1), train_config=TrainConfig(iterations=15))
    serial = run_experiment(
        [manifest], {manifest.dataset_name: store}, ["zip", "zip_f"], **kwargs)
    parallel = run_experiment(
        [manifest], {manifest.dataset_name: store}, ["zip", "zip_f"],
        threads=4, **kwargs)
    assert report_json(serial) == report_json(parallel)


def test_run_experiment_multiple_datasets():
    m1, s1 = easy_setup(name="left", seed=0)
    m2, s2 = easy_setup(name="right", seed=7)
    table = run_experiment(
        [m1, m2], {"left": s1, "right": s2}, ["protonet"],
        k_list=(2,), seeds=(0,))
    assert table.datasets == ["left", "right"]
    hand = np.mean([table.mean_accuracy("left", "protonet", 2),
                    table.mean_accuracy("right", "protonet", 2)])
    assert table.grand_average("protonet", 2) == pytest.approx(hand)


def test_run_experiment_rejects_empty_classifier_list():
    manifest, store = easy_setup()
    with pytest.raises(ValueError):
        run_experiment([manifest], {manifest.dataset_name: store}, [],
                       k_list=(1,), seeds=(0,))


def test_coverage_error_on_missing_embedding():
    manifest, store = easy_setup()
    victim = manifest.instances[0].instance_id
    del store[victim]
    with pytest.raises(CoverageError) as err:
        check_coverage(manifest, store)
    assert victim in str(err.value)
    with pytest.raises(CoverageError):
        run_experiment([manifest], {manifest.dataset_name: store}, ["zip"],
                       k_list=(1,), seeds=(0,))


# ---------------------------------------------------------------------------
# reports


def test_report_determinism_byte_identical(tmp_path):
    manifest, store = easy_setup(per_class=6, v=2)

    def render():
        table = run_experiment(
            [manifest], {manifest.dataset_name: store}, ["zip", "zip_f", "knn"],
            k_list=(1, 2), seeds=(0, 1),
            train_config=TrainConfig(iterations=20))
        return (report_json(table), report_csv(table), report_text(table))

    first = render()
    second = render()
    assert first == second
    for fmt, payload in zip(("json", "csv", "text"), first):
        path = emit_report(
            run_experiment([manifest], {manifest.dataset_name: store},
                           ["zip", "zip_f", "knn"], k_list=(1, 2), seeds=(0, 1),
                           train_config=TrainConfig(iterations=20)),
            fmt, tmp_path / f"report.{fmt}")
        assert path.read_text(encoding="utf-8") == payload


def test_report_json_structure_and_values():
    table = handmade_table()
    doc = json.loads(report_json(table))
    assert doc["format"] == "mvrec-report/1"
    assert doc["datasets"] == ["alpha", "beta"]
    assert len(doc["cells"]) == 4
    assert doc["cells"][0]["accuracy_percent"] == pytest.approx(80.0)
    mean_rows = {(r["dataset"], r["k"]): r["accuracy_percent"]
                 for r in doc["per_dataset_mean"]}
    assert mean_rows[("alpha", 1)] == pytest.approx(85.0)
    assert doc["average"][0]["accuracy_percent"] == pytest.approx(70.0)


def test_report_text_one_decimal():
    cells = [
        ResultCell("alpha", "zip", 1, 0, 0.8567, 10),
        ResultCell("alpha", "zip", 1, 1, 0.8567, 10),
    ]
    table = ResultTable(cells, ["alpha"], ["zip"], [1], [0, 1])
    text = report_text(table)
    assert "== K=1 ==" in text
    assert "85.7" in text
    assert "Average" in text
    # exactly one decimal place, no full-precision leakage
    assert "85.67" not in text


def test_report_csv_round_trips_against_json():
    table = handmade_table()
    doc = json.loads(report_json(table))
    rows = list(csv.DictReader(io.StringIO(report_csv(table))))
    cell_rows = [r for r in rows if r["seed"] not in ("mean",)]
    assert len(cell_rows) == len(doc["cells"])
    for got, want in zip(cell_rows, doc["cells"]):
        assert got["dataset"] == want["dataset"]
        assert abs(float(got["accuracy_percent"]) - want["accuracy_percent"]) < 1e-9
    avg_rows = [r for r in rows if r["dataset"] == "average"]
    assert abs(float(avg_rows[0]["accuracy_percent"]) - 70.0) < 1e-9


def test_emit_report_rejects_empty_table_and_bad_format(tmp_path):
    empty = ResultTable([], [], [], [], [])
    with pytest.raises(ValueError):
        emit_report(empty, "json", tmp_path / "r.json")
    with pytest.raises(ValueError):
        emit_report(handmade_table(), "yaml", tmp_path / "r.yaml")


def test_config_echo_stable_bytes(tmp_path):
    config = {"k_list": [1, 3], "sigma_view": 0.2, "classifiers": ["zip"]}
    p1 = write_config_echo(tmp_path / "a.json", config)
    p2 = write_config_echo(tmp_path / "b.json", dict(reversed(config.items())))
    assert p1.read_bytes() == p2.read_bytes()
    assert json.loads(p1.read_text()) == config


# ---------------------------------------------------------------------------
# ablation drivers


def test_synthetic_ablation_store_view_counts():
    manifest = make_synthetic_manifest(2, 4, seed=0)
    stores = synthetic_ablation_stores(manifest, AugmentConfig(), channels=8)
    expected = {"none": 1, "scale": 3, "rotate": 4, "flip": 2, "offset": 9,
                "scale+rotate": 12, "scale+flip": 6, "scale+offset": 27}
    assert set(stores) == set(expected)
    some_id = manifest.instances[0].instance_id
    for name, want in expected.items():
        assert stores[name][some_id].num_views == want


def test_ablation_suite_uses_variant_names_as_datasets():
    manifest = make_synthetic_manifest(3, 6, seed=0)
    stores = synthetic_ablation_stores(
        manifest, AugmentConfig(), channels=16,
        sigma_view=0.3, sigma_inst=0.05, combos=("none", "scale+offset"))
    table = ablation_suite(
        manifest, stores, classifiers=("zip",), k_list=(2,), seeds=(0, 1))
    assert table.datasets == ["none", "scale+offset"]
    for cell in table.cells:
        assert 0.0 <= cell.accuracy <= 1.0


def test_trainable_flags_suite_frozen_equals_training_free():
    manifest, store = easy_setup(n=3, per_class=6, v=2)
    table = trainable_flags_suite(
        manifest, store, k_list=(2,), seeds=(0, 1),
        train_config=TrainConfig(iterations=25))
    names = table.classifiers
    assert names[:4] == ["zip_f[frozen]", "zip_f[cache]", "zip_f[zip]",
                         "zip_f[cache+zip]"]
    assert "zip[matched-beta]" in names
    for seed in (0, 1):
        frozen = table.cell(manifest.dataset_name, "zip_f[frozen]", 2, seed)
        free = table.cell(manifest.dataset_name, "zip[matched-beta]", 2, seed)
        assert frozen.accuracy == free.accuracy


def test_synthetic_experiment_smoke():
    table = synthetic_experiment(
        n_classes=3, per_class=6, channels=16, num_views=2,
        sigma_view=0.1, sigma_inst=0.03,
        classifiers=("zip", "knn"), k_list=(1,), seeds=(0, 1))
    assert table.datasets == ["synthetic"]
    assert table.mean_accuracy("synthetic", "zip", 1) == 1.0
