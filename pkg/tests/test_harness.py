import json
from dataclasses import replace

import numpy as np
import pytest

from neighborlab.harness import (
    ANNOTATION_ROWS,
    ExperimentConfig,
    aggregate_metric_values,
    format_cell,
    load_experiment_corpus,
    nus_wide_protocol_config,
    run_annotation_experiment,
    run_correlation_analysis,
    run_cross_metadata,
    run_metadata_comparison,
    run_sweep,
    run_vocab_overlap,
    split_vocabulary_overlap,
)
from neighborlab.optim import TrainConfig
from neighborlab.synthgen import KindParams, SynthConfig
from neighborlab.util import ValidationError


SMALL_SYNTH = SynthConfig(
    n_images=500, n_topics=4, n_labels=8, d=12, seed=9, ambiguous_fraction=0.3,
    tags=KindParams(120, 10.0, 0.1), groups=KindParams(80, 6.0, 0.3),
    sets=KindParams(160, 3.0, 0.45),
)


def small_config(tmp_path, **overrides) -> ExperimentConfig:
    base = dict(
        out_dir=str(tmp_path / "run"),
        synth=SMALL_SYNTH,
        fractions=(0.6, 0.2),
        train=TrainConfig(h=16, epochs=2, batch=25, seed=0, lr=1e-3),
        m=2,
        max_rank=4,
        samples_test=5,
        knn_k=10,
        upper_bound_epochs=5,
        upper_bound_lr=1e-2,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# config plumbing


def test_config_json_round_trip(tmp_path):
    cfg = small_config(tmp_path)
    obj = cfg.to_dict()
    restored = ExperimentConfig.from_dict(json.loads(json.dumps(obj)))
    assert restored.to_dict() == obj


def test_config_from_file_with_overrides(tmp_path):
    cfg = small_config(tmp_path)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    loaded = ExperimentConfig.from_file(path, {"m": 3, "max_rank": 6})
    assert (loaded.m, loaded.max_rank) == (3, 6)
    assert loaded.synth.n_images == SMALL_SYNTH.n_images


def test_config_requires_corpus_or_synth(tmp_path):
    with pytest.raises(ValidationError, match="corpus_dir or a synth"):
        ExperimentConfig(out_dir=str(tmp_path))


def test_semantic_dict_ignores_paths(tmp_path):
    a = small_config(tmp_path / "a")
    b = small_config(tmp_path / "b")
    assert a.semantic_dict() == b.semantic_dict()


def test_protocol_config_shape(tmp_path):
    cfg = nus_wide_protocol_config(str(tmp_path / "corpus"), str(tmp_path / "out"))
    assert cfg.sizes == (110_000, 40_000, 40_253)
    assert cfg.n_splits == 5
    assert cfg.tau == 5000
    assert (cfg.m, cfg.max_rank) == (3, 6)
    assert cfg.train.h == 500
    assert (cfg.train.lr, cfg.train.l2, cfg.train.batch, cfg.train.epochs) == (
        1e-4, 3e-3, 50, 10,
    )


def test_aggregate_and_format():
    agg = aggregate_metric_values([50.0, 52.0, 51.0])
    assert agg["mean"] == pytest.approx(51.0)
    assert agg["std"] == pytest.approx(1.0)
    assert format_cell(agg) == "51.00 ± 1.00"
    single = aggregate_metric_values([49.5])
    assert single["std"] is None
    assert format_cell(single) == "49.50"


# ---------------------------------------------------------------------------
# corpus loading


def test_load_experiment_corpus_synth_and_dir(tmp_path):
    cfg = small_config(tmp_path)
    corpus, provenance, key = load_experiment_corpus(cfg)
    assert len(corpus) == SMALL_SYNTH.n_images
    assert provenance is not None
    from neighborlab.synthgen import write_synth_corpus

    write_synth_corpus(SMALL_SYNTH, tmp_path / "corpus")
    cfg_dir = small_config(tmp_path, synth=None, corpus_dir=str(tmp_path / "corpus"))
    corpus2, provenance2, key2 = load_experiment_corpus(cfg_dir)
    assert len(corpus2) == len(corpus)
    assert provenance2 is not None
    assert key != key2  # synth-config key vs file-digest key


# ---------------------------------------------------------------------------
# annotation experiment


@pytest.fixture(scope="module")
def annotation_bundle(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("annotation")
    cfg = small_config(tmp)
    return cfg, run_annotation_experiment(cfg)


def test_annotation_bundle_rows(annotation_bundle):
    _, bundle = annotation_bundle
    assert list(bundle.rows) == list(ANNOTATION_ROWS)
    assert all(len(reports) == 1 for reports in bundle.rows.values())


def test_annotation_outputs_written(annotation_bundle):
    cfg, bundle = annotation_bundle
    from pathlib import Path

    out = Path(cfg.out_dir)
    assert (out / "table.csv").exists()
    assert (out / "bundle.json").exists()
    report_path = out / "split_0" / "neighbor_model.report.json"
    payload = json.loads(report_path.read_text())
    assert payload["config_hash"] == bundle.config_hash


def test_annotation_rerun_bit_identical(annotation_bundle, tmp_path):
    cfg, bundle = annotation_bundle
    rerun_cfg = small_config(tmp_path)  # fresh out_dir, no shared cache
    rerun = run_annotation_experiment(rerun_cfg)
    assert rerun.config_hash == bundle.config_hash
    for name in bundle.rows:
        a = bundle.rows[name][0].metric_values()
        b = rerun.rows[name][0].metric_values()
        assert a == b, name


def test_annotation_cache_reuse(annotation_bundle):
    cfg, bundle = annotation_bundle
    from pathlib import Path

    cache_files = list(Path(cfg.out_dir, "cache").iterdir())
    assert any(p.name.startswith("nbrs_") for p in cache_files)
    assert any(p.name.startswith("ckpt_") for p in cache_files)
    again = run_annotation_experiment(cfg)  # cache hit path
    for name in bundle.rows:
        assert again.rows[name][0].metric_values() == bundle.rows[name][0].metric_values()


def test_annotation_multi_split_aggregation(tmp_path):
    cfg = small_config(tmp_path, n_splits=2)
    bundle = run_annotation_experiment(cfg)
    agg = bundle.aggregate()
    for name, metrics in agg.items():
        assert len(metrics["mAP_L"]["values"]) == 2
        assert metrics["mAP_L"]["std"] is not None


# ---------------------------------------------------------------------------
# metadata comparison and cross-metadata


def test_cross_metadata_diagonal_matches_comparison(tmp_path):
    cfg = small_config(tmp_path)
    comparison = run_metadata_comparison(cfg)
    cross = run_cross_metadata(cfg)
    for kind in ("tags", "sets", "groups"):
        diag = cross["cells"][f"{kind}->{kind}"]["mAP_L"]["values"]
        comp = [r.metric_values()["mAP_L"] for r in comparison.rows[kind]]
        assert diag == comp
    assert "visual_only" in comparison.rows
    from pathlib import Path

    assert (Path(cfg.out_dir) / "cross_metadata.csv").exists()
    assert (Path(cfg.out_dir) / "metadata_comparison.csv").exists()


def test_metadata_comparison_with_visual_neighbors(tmp_path):
    cfg = small_config(tmp_path, include_visual_neighbors=True)
    bundle = run_metadata_comparison(cfg)
    assert set(bundle.rows) == {"tags", "sets", "groups", "visual", "visual_only"}


# ---------------------------------------------------------------------------
# sweep


def test_sweep_grid_rows(tmp_path):
    cfg = small_config(tmp_path)
    rows = run_sweep(cfg, m_grid=[1, 2, 9], max_rank_grid=[4], tau_grid=[None])
    by_point = {(r["axis"], r["value"]): r for r in rows}
    assert by_point[("m", 9)]["status"] == "infeasible"  # m > max_rank
    assert by_point[("m", 2)]["mAP_L"] is not None
    assert by_point[("max_rank", 4)]["value"] == cfg.max_rank  # defaults in grid
    from pathlib import Path

    assert (Path(cfg.out_dir) / "sweep.csv").exists()


def test_sweep_m_equals_max_rank_single_neighborhood(tmp_path):
    cfg = small_config(tmp_path)
    rows = run_sweep(cfg, m_grid=[4])  # m = max_rank = 4 -> one candidate
    assert rows[0]["status"] == "ok"
    assert rows[0]["mAP_L"] is not None


# ---------------------------------------------------------------------------
# vocabulary overlap


def test_split_vocabulary_overlap_construction():
    vocab = list(range(40))
    train0, test0 = split_vocabulary_overlap(vocab, 0.0, seed=1)
    assert train0.isdisjoint(test0)
    assert train0 | test0 == set(vocab)
    train100, test100 = split_vocabulary_overlap(vocab, 100.0, seed=1)
    assert train100 == test100 == set(vocab)
    train50, test50 = split_vocabulary_overlap(vocab, 50.0, seed=1)
    assert len(train50 & test50) == 20


def test_overlap_100_equals_standard_run(tmp_path):
    cfg = small_config(tmp_path)
    bundle = run_annotation_experiment(cfg)
    rows = run_vocab_overlap(cfg, overlaps=[100.0])
    standard = bundle.rows["neighbor_model"][0].metric_values()["mAP_L"]
    assert rows[0]["mAP_L"] == standard


def test_overlap_zero_disjoint_still_runs(tmp_path):
    cfg = small_config(tmp_path)
    rows = run_vocab_overlap(cfg, overlaps=[0.0, 100.0])
    assert rows[0]["overlap_pct"] == 0.0
    assert rows[0]["mAP_L"] is not None
    from pathlib import Path

    csv_text = (Path(cfg.out_dir) / "vocab_overlap.csv").read_text()
    assert "monotone_nondecreasing" in csv_text


# ---------------------------------------------------------------------------
# correlation analysis


def test_correlation_analysis_outputs(tmp_path):
    cfg = small_config(tmp_path)
    results = run_correlation_analysis(cfg, k_max=4)
    assert set(results) == {"tags", "sets", "groups"}
    from pathlib import Path

    for kind in results:
        assert (Path(cfg.out_dir) / f"correlation_{kind}.csv").exists()
        mean = results[kind].mean_curve()
        assert mean.shape == (4,)
        assert np.all((mean[~np.isnan(mean)] >= 0) & (mean[~np.isnan(mean)] <= 1))


def test_correlation_matches_direct_computation(tmp_path):
    from neighborlab.neighbors import build_neighbor_lists, neighbor_label_correlation

    cfg = small_config(tmp_path)
    results = run_correlation_analysis(cfg, k_max=3)
    corpus, _, _ = load_experiment_corpus(cfg)
    ids = [r.id for r in corpus.images]
    from neighborlab.corpus import MetadataKind

    direct = neighbor_label_correlation(
        corpus, build_neighbor_lists(corpus, ids, MetadataKind.TAGS, 3), 3
    )
    for label, curve in direct.curves.items():
        assert np.allclose(results["tags"].curves[label], curve, equal_nan=True)
