"""Experiment orchestration: annotation benchmark with baselines, metadata
comparison, hyperparameter sweeps, vocabulary-overlap and cross-metadata
generalization, correlation analysis, and multi-split aggregation.

Every run is reproducible bit-for-bit from (config, seeds): all randomness
flows through seeds mixed per stage, reports embed the config hash, and
stage outputs (neighbor lists, checkpoints, score matrices) are cached on
disk keyed by content hashes so repeated and overlapping runs reuse work.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import baselines as bl
from . import model as model_mod
from . import neighbors as nb
from . import optim
from .corpus import (
    Corpus,
    MetadataKind,
    SplitSpec,
    filter_images,
    load_corpus_dir,
    make_splits,
    select_tag_vocabulary,
)
from .metrics import (
    EvalReport,
    ScoreMatrix,
    evaluate_scorematrix,
    load_score_matrix,
    save_report_json,
    save_score_matrix,
)
from .optim import TagVectorizer, TrainConfig
from .synthgen import SynthConfig, SynthProvenance, synth_generate
from .util import ValidationError, content_key, derive_seed, file_digest

logger = logging.getLogger(__name__)

VISUAL_BACKEND = "visual"
METADATA_KIND_NAMES = tuple(k.value for k in MetadataKind)
ANNOTATION_ROWS = (
    "upper_bound",
    "tag_only",
    "visual_only",
    "knn_vote",
    "neighborhood_voting",
    "neighbor_model",
)


@dataclass
class ExperimentConfig:
    """Everything a run needs; file-based configs mirror these fields 1:1."""

    out_dir: str = "runs/exp"
    corpus_dir: str | None = None
    synth: SynthConfig | None = None
    fractions: tuple[float, ...] = (0.6, 0.2)  # test takes the remainder
    sizes: tuple[int, int, int] | None = None
    n_splits: int = 1
    split_seed: int = 0
    train_kind: str = "tags"
    test_kind: str = "tags"
    tau: int | None = None  # None: full tag vocabulary
    m: int = 3
    max_rank: int = 6
    samples_test: int = 10
    n_top: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)
    use_tag_vector: bool = False
    knn_k: int = 50
    alpha_grid: tuple[float, ...] = bl.DEFAULT_ALPHA_GRID
    upper_bound_lr: float = 1e-2
    upper_bound_epochs: int = 30
    include_visual_neighbors: bool = False
    emit_plots: bool = False
    use_cache: bool = True

    def __post_init__(self):
        if self.corpus_dir is None and self.synth is None:
            raise ValidationError("config needs corpus_dir or a synth section")
        for kind in (self.train_kind, self.test_kind):
            if kind not in METADATA_KIND_NAMES + (VISUAL_BACKEND,):
                raise ValidationError(f"unknown metadata kind {kind!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.synth is not None:
            out["synth"] = self.synth.to_dict()
        out["train"] = asdict(self.train)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        if obj.get("synth") is not None:
            obj["synth"] = SynthConfig.from_dict(obj["synth"])
        if "train" in obj and isinstance(obj["train"], dict):
            obj["train"] = TrainConfig(**obj["train"])
        for name in ("fractions", "sizes", "alpha_grid"):
            if obj.get(name) is not None:
                obj[name] = tuple(obj[name])
        return cls(**obj)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        obj.update(overrides or {})
        return cls.from_dict(obj)

    def semantic_dict(self) -> dict:
        """Config content that determines results (paths and IO toggles out)."""
        out = self.to_dict()
        for name in ("out_dir", "corpus_dir", "emit_plots", "use_cache"):
            out.pop(name, None)
        return out


def nus_wide_protocol_config(corpus_dir: str, out_dir: str) -> ExperimentConfig:
    """The full-scale benchmark protocol for a user-supplied corpus in the
    documented formats: 5 splits of 110K/40K/40,253, top-3 assignment,
    tag vocabulary 5000, neighborhoods m=3 of the top M=6, hidden width 500."""
    return ExperimentConfig(
        out_dir=out_dir,
        corpus_dir=corpus_dir,
        sizes=(110_000, 40_000, 40_253),
        n_splits=5,
        tau=5000,
        m=3,
        max_rank=6,
        train=TrainConfig(h=500),
    )


# ---------------------------------------------------------------------------
# stage cache


class StageCache:
    """Content-keyed disk cache for neighbor lists, checkpoints, scores."""

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, prefix: str, key_dict: dict, suffix: str) -> Path | None:
        if self.root is None:
            return None
        return self.root / f"{prefix}_{content_key(key_dict)}{suffix}"

    def neighbor_lists(self, key_dict: dict, builder) -> dict[int, nb.NeighborList]:
        path = self._path("nbrs", key_dict, ".jsonl")
        if path is not None and path.exists():
            return nb.load_neighbor_lists(path)
        lists = builder()
        if path is not None:
            nb.save_neighbor_lists(path, lists)
        return lists

    def checkpoint(self, key_dict: dict, builder) -> tuple[model_mod.ModelParams, dict]:
        path = self._path("ckpt", key_dict, ".nlpm")
        if path is not None and path.exists():
            return model_mod.load_checkpoint(path)
        params, meta = builder()
        if path is not None:
            model_mod.save_checkpoint(path, params, meta)
        return params, meta

    def scores(self, key_dict: dict, builder) -> ScoreMatrix:
        path = self._path("scores", key_dict, ".nlsm")
        if path is not None and path.exists():
            return load_score_matrix(path)
        sm = builder()
        if path is not None:
            save_score_matrix(path, sm)
        return sm


# ---------------------------------------------------------------------------
# corpus loading and per-split assets


def load_experiment_corpus(config: ExperimentConfig):
    """Load or generate the corpus, apply availability filtering, and return
    (corpus, provenance or None, corpus content key)."""
    if config.synth is not None:
        corpus, provenance = synth_generate(config.synth)
        corpus_key = content_key({"synth": config.synth.to_dict()})
    else:
        root = Path(config.corpus_dir)
        corpus = load_corpus_dir(root)
        provenance = None
        prov_path = root / "provenance.json"
        if prov_path.exists():
            provenance = SynthProvenance.load(prov_path)
        corpus_key = content_key(
            {
                "features": file_digest(root / "features.bin"),
                "metadata": file_digest(root / "metadata.jsonl"),
                "labels": file_digest(root / "labels.txt"),
            }
        )
    n_before = len(corpus)
    corpus = filter_images(corpus)
    if len(corpus) != n_before:
        logger.info("filtered corpus: %d -> %d images", n_before, len(corpus))
    return corpus, provenance, corpus_key


class SplitAssets:
    """Lazy per-split products: selected vocabularies, per-pool neighbor
    lists, trained models; everything content-cached."""

    def __init__(self, config: ExperimentConfig, corpus: Corpus, corpus_key: str,
                 split_index: int, split: SplitSpec, cache: StageCache):
        self.config = config
        self.corpus = corpus
        self.corpus_key = corpus_key
        self.split_index = split_index
        self.split = split
        self.cache = cache
        self._tag_vocab: dict[int | None, set[int]] = {}

    # -- pools ------------------------------------------------------------
    def pool_ids(self, pool: str) -> list[int]:
        try:
            return {"train": self.split.train, "val": self.split.val,
                    "test": self.split.test}[pool]
        except KeyError:
            raise ValidationError(f"unknown pool {pool!r}") from None

    def _split_key(self) -> dict:
        return {"corpus": self.corpus_key, "seed": self.split.seed,
                "sizes": [len(self.split.train), len(self.split.val), len(self.split.test)]}

    # -- vocabularies -------------------------------------------------------
    def tag_vocabulary(self, tau: int | None = None) -> set[int]:
        tau = tau if tau is not None else self.config.tau
        if tau not in self._tag_vocab:
            full = len(self.corpus.vocab[MetadataKind.TAGS])
            self._tag_vocab[tau] = select_tag_vocabulary(
                self.corpus, self.split.train, MetadataKind.TAGS, tau if tau else full
            )
        return self._tag_vocab[tau]

    def vocab_for(self, kind: str, tau: int | None = None) -> set[int] | None:
        if kind == MetadataKind.TAGS.value:
            return self.tag_vocabulary(tau)
        return None  # sets/groups/visual: entire vocabulary

    # -- neighbor lists -----------------------------------------------------
    def lists(self, pool: str, kind: str, max_rank: int | None = None,
              vocab: Iterable[int] | None = None, tau: int | None = None
              ) -> dict[int, nb.NeighborList]:
        max_rank = max_rank or self.config.max_rank
        ids = self.pool_ids(pool)
        if kind == VISUAL_BACKEND:
            key = {"stage": "nbrs", "backend": "visual", "split": self._split_key(),
                   "pool": pool, "M": max_rank}
            return self.cache.neighbor_lists(
                key, lambda: nb.build_visual_neighbor_lists(self.corpus, ids, max_rank)
            )
        vocab_set = set(vocab) if vocab is not None else self.vocab_for(kind, tau)
        vocab_key = "full" if vocab_set is None else content_key(sorted(vocab_set))
        key = {"stage": "nbrs", "backend": "jaccard", "split": self._split_key(),
               "pool": pool, "kind": kind, "vocab": vocab_key, "M": max_rank}
        return self.cache.neighbor_lists(
            key,
            lambda: nb.build_neighbor_lists(
                self.corpus, ids, MetadataKind(kind), max_rank, vocab_set
            ),
        )

    def spec(self, m: int | None = None, max_rank: int | None = None) -> nb.NeighborhoodSpec:
        return nb.NeighborhoodSpec(
            m=m or self.config.m,
            max_rank=max_rank or self.config.max_rank,
            samples_test=self.config.samples_test,
            seed=self.config.train.seed,
            allow_degenerate=True,
        )

    # -- models ---------------------------------------------------------------
    def neighbor_model(
        self,
        kind: str,
        m: int | None = None,
        max_rank: int | None = None,
        tau: int | None = None,
        train_vocab: Iterable[int] | None = None,
        use_tag_vector: bool | None = None,
    ) -> tuple[model_mod.ModelParams, dict]:
        """Train (or load) the neighbor-pooling model for one neighbor source."""
        use_tag_vector = self.config.use_tag_vector if use_tag_vector is None else use_tag_vector
        spec = self.spec(m, max_rank)
        vocab = set(train_vocab) if train_vocab is not None else self.vocab_for(kind, tau)
        lists = dict(self.lists("train", kind, spec.max_rank, vocab))
        lists.update(self.lists("val", kind, spec.max_rank, vocab))
        vectorizer = None
        if use_tag_vector:
            vectorizer = TagVectorizer(self.tag_vocabulary(tau))
        key = {
            "stage": "model",
            "split": self._split_key(),
            "kind": kind,
            "vocab": "full" if vocab is None else content_key(sorted(vocab)),
            "m": spec.m,
            "M": spec.max_rank,
            "samples_test": spec.samples_test,
            "train": asdict(self.config.train),
            "tag_vector": sorted(vectorizer.vocab_ids) if vectorizer else None,
        }

        def build():
            params, history = optim.train(
                self.corpus, self.split, lists, spec, self.config.train, vectorizer
            )
            best = max(
                (row.val_map_label for row in history), default=float("nan")
            )
            meta = {"train_config": asdict(self.config.train), "epochs": len(history),
                    "best_val_map_label": best}
            hist_dir = Path(self.config.out_dir) / f"split_{self.split_index}"
            hist_dir.mkdir(parents=True, exist_ok=True)
            optim.save_history(hist_dir / f"history_{kind}_{content_key(key)}.csv", history)
            return params, meta

        params, meta = self.cache.checkpoint(key, build)
        meta = dict(meta)
        meta["key"] = key
        if vectorizer is not None:
            meta["vectorizer"] = vectorizer
        return params, meta

    def eval_neighbor_model(
        self,
        params: model_mod.ModelParams,
        model_meta: dict,
        test_kind: str,
        pool: str = "test",
        m: int | None = None,
        max_rank: int | None = None,
        test_vocab: Iterable[int] | None = None,
        tau: int | None = None,
    ) -> tuple[ScoreMatrix, EvalReport]:
        spec = self.spec(m, max_rank)
        vocab = set(test_vocab) if test_vocab is not None else self.vocab_for(test_kind, tau)
        lists = self.lists(pool, test_kind, spec.max_rank, vocab)
        vectorizer = model_meta.get("vectorizer")
        ids = self.pool_ids(pool)
        key = {
            "stage": "scores",
            "model": model_meta.get("key"),
            "pool": pool,
            "test_kind": test_kind,
            "vocab": "full" if vocab is None else content_key(sorted(vocab)),
            "m": spec.m,
            "M": spec.max_rank,
            "samples_test": spec.samples_test,
            "seed": spec.seed,
        }
        sm = self.cache.scores(
            key,
            lambda: optim.evaluate_scores(params, self.corpus, ids, lists, spec, vectorizer),
        )
        report = evaluate_scorematrix(sm, self.corpus.label_sets(ids), self.config.n_top)
        return sm, report


# ---------------------------------------------------------------------------
# aggregation and bundles


def aggregate_metric_values(values: Sequence[float]) -> dict:
    arr = np.asarray([v for v in values], dtype=np.float64)
    out = {"mean": float(arr.mean()), "values": [float(v) for v in arr]}
    out["std"] = float(arr.std(ddof=1)) if len(arr) > 1 else None
    return out


def aggregate_reports(reports: Sequence[EvalReport]) -> dict[str, dict]:
    return {
        metric: aggregate_metric_values([r.metric_values()[metric] for r in reports])
        for metric in EvalReport.METRIC_COLUMNS
    }


def format_cell(agg: dict) -> str:
    if agg["std"] is None:
        return f"{agg['mean']:.2f}"
    return f"{agg['mean']:.2f} ± {agg['std']:.2f}"


@dataclass
class ExperimentBundle:
    """Per-split reports for a set of named models, plus aggregation."""

    config_hash: str
    rows: dict[str, list[EvalReport]]
    extras: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict[str, dict]]:
        return {name: aggregate_reports(reports) for name, reports in self.rows.items()}

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "rows": {
                name: {
                    "aggregate": aggregate_reports(reports),
                    "reports": [r.to_dict() for r in reports],
                }
                for name, reports in self.rows.items()
            },
            "extras": self.extras,
        }


def write_bundle(out_dir, bundle: ExperimentBundle, table_name: str = "table.csv") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bundle.json", "w", encoding="utf-8") as f:
        json.dump(bundle.to_dict(), f, indent=2, sort_keys=True)
    agg = bundle.aggregate()
    with open(out / table_name, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["method", *EvalReport.METRIC_COLUMNS])
        for name, metrics_agg in agg.items():
            writer.writerow([name] + [format_cell(metrics_agg[c]) for c in
                                      EvalReport.METRIC_COLUMNS])
    for name, reports in bundle.rows.items():
        for split_index, report in enumerate(reports):
            split_dir = out / f"split_{split_index}"
            split_dir.mkdir(exist_ok=True)
            save_report_json(
                split_dir / f"{name}.report.json",
                report,
                {"config_hash": bundle.config_hash, "model": name, "split": split_index},
            )


# ---------------------------------------------------------------------------
# experiment runners


def _experiment_context(config: ExperimentConfig):
    corpus, provenance, corpus_key = load_experiment_corpus(config)
    splits = make_splits(
        corpus, config.fractions, config.n_splits, config.split_seed, sizes=config.sizes
    )
    cache = StageCache(Path(config.out_dir) / "cache") if config.use_cache else StageCache(None)
    config_hash = content_key({"config": config.semantic_dict(), "corpus": corpus_key})
    assets = [
        SplitAssets(config, corpus, corpus_key, i, split, cache)
        for i, split in enumerate(splits)
    ]
    return corpus, provenance, config_hash, assets


def _train_linear(
    assets: SplitAssets,
    features_train: np.ndarray,
    features_val: np.ndarray,
    train_cfg: TrainConfig,
) -> bl.LinearModel:
    corpus, split = assets.corpus, assets.split
    model, _ = bl.train_logistic_ova(
        features_train,
        corpus.label_sets(split.train),
        train_cfg,
        val_features=features_val if len(split.val) else None,
        val_labels=corpus.label_sets(split.val) if len(split.val) else None,
        n_labels=corpus.n_labels,
    )
    return model


def run_annotation_experiment(config: ExperimentConfig) -> ExperimentBundle:
    """The benchmark table: upper bound, tag-only and visual-only logistic,
    feature k-NN voting, neighborhood score voting, and the neighbor model,
    all evaluated on the test pool with top-n assignment and both mAPs."""
    corpus, _, config_hash, all_assets = _experiment_context(config)
    row_names = list(ANNOTATION_ROWS) + (
        ["neighbor_model_tag_vector"] if config.use_tag_vector else []
    )
    rows: dict[str, list[EvalReport]] = {name: [] for name in row_names}
    extras: dict = {"alpha": [], "n_images": len(corpus)}

    for assets in all_assets:
        split = assets.split
        train_ids, val_ids, test_ids = split.train, split.val, split.test
        gt_test = corpus.label_sets(test_ids)

        def report_for(scores: ScoreMatrix) -> EvalReport:
            return evaluate_scorematrix(scores, gt_test, config.n_top)

        # upper bound: ground-truth indicators as features, trained hard
        ub_cfg = replace(config.train, lr=config.upper_bound_lr,
                         epochs=config.upper_bound_epochs)
        ub_model = _train_linear(
            assets,
            bl.upper_bound_features(corpus, train_ids),
            bl.upper_bound_features(corpus, val_ids),
            ub_cfg,
        )
        ub_scores = ScoreMatrix(
            ids=np.array(test_ids), scores=ub_model.predict(bl.upper_bound_features(corpus, test_ids))
        )
        rows["upper_bound"].append(report_for(ub_scores))

        # tag-only logistic on binary tag indicators over the selected vocabulary
        vectorizer = TagVectorizer(assets.tag_vocabulary())
        tag_model = _train_linear(
            assets,
            vectorizer.matrix(corpus, train_ids),
            vectorizer.matrix(corpus, val_ids),
            config.train,
        )
        tag_scores = ScoreMatrix(
            ids=np.array(test_ids), scores=tag_model.predict(vectorizer.matrix(corpus, test_ids))
        )
        rows["tag_only"].append(report_for(tag_scores))

        # visual-only logistic on the provided feature vectors
        vis_model = _train_linear(
            assets,
            corpus.feature_matrix(train_ids),
            corpus.feature_matrix(val_ids),
            config.train,
        )
        vis_test = ScoreMatrix(
            ids=np.array(test_ids), scores=vis_model.predict(corpus.feature_matrix(test_ids))
        )
        rows["visual_only"].append(report_for(vis_test))

        # feature k-NN label voting against the training set
        k = min(config.knn_k, len(train_ids))
        vote_scores = bl.knn_vote(
            corpus.feature_matrix(train_ids),
            corpus.label_sets(train_ids),
            corpus.feature_matrix(test_ids),
            k,
            n_labels=corpus.n_labels,
            train_ids=np.array(train_ids),
            query_ids=np.array(test_ids),
        )
        rows["knn_vote"].append(report_for(vote_scores))

        # blend visual-only scores with neighbors' (alpha tuned on validation)
        val_lists = assets.lists("val", config.test_kind)
        test_lists = assets.lists("test", config.test_kind)
        vis_val = ScoreMatrix(
            ids=np.array(val_ids), scores=vis_model.predict(corpus.feature_matrix(val_ids))
        ) if val_ids else None
        if vis_val is not None:
            alpha, _ = bl.tune_voting_alpha(
                vis_val, val_lists, corpus.label_sets(val_ids), config.alpha_grid
            )
        else:
            alpha = 0.5
        extras["alpha"].append(alpha)
        rows["neighborhood_voting"].append(
            report_for(bl.apply_neighborhood_voting(vis_test, test_lists, alpha))
        )

        # the neighbor-pooling model
        params, meta = assets.neighbor_model(config.train_kind, use_tag_vector=False)
        _, nbr_report = assets.eval_neighbor_model(params, meta, config.test_kind)
        rows["neighbor_model"].append(nbr_report)

        if config.use_tag_vector:
            params_tv, meta_tv = assets.neighbor_model(config.train_kind, use_tag_vector=True)
            _, tv_report = assets.eval_neighbor_model(params_tv, meta_tv, config.test_kind)
            rows["neighbor_model_tag_vector"].append(tv_report)

    bundle = ExperimentBundle(config_hash=config_hash, rows=rows, extras=extras)
    write_bundle(config.out_dir, bundle)
    return bundle


def run_metadata_comparison(
    config: ExperimentConfig, kinds: Sequence[str] | None = None
) -> ExperimentBundle:
    """One neighbor model per neighbor source (tags/groups/sets, optionally
    visual feature neighbors), evaluated with the matching test-pool
    neighbors, plus the visual-only reference row."""
    corpus, _, config_hash, all_assets = _experiment_context(config)
    kinds = list(kinds) if kinds is not None else list(METADATA_KIND_NAMES)
    if config.include_visual_neighbors and VISUAL_BACKEND not in kinds:
        kinds.append(VISUAL_BACKEND)
    present = []
    for kind in kinds:
        if kind == VISUAL_BACKEND or any(
            len(rec.terms(MetadataKind(kind))) for rec in corpus.images
        ):
            present.append(kind)
        else:
            logger.warning("metadata kind %s absent from corpus; skipped", kind)
    rows: dict[str, list[EvalReport]] = {kind: [] for kind in present}
    rows["visual_only"] = []

    for assets in all_assets:
        for kind in present:
            params, meta = assets.neighbor_model(kind)
            _, report = assets.eval_neighbor_model(params, meta, kind)
            rows[kind].append(report)
        vis_model = _train_linear(
            assets,
            corpus.feature_matrix(assets.split.train),
            corpus.feature_matrix(assets.split.val),
            config.train,
        )
        vis_scores = ScoreMatrix(
            ids=np.array(assets.split.test),
            scores=vis_model.predict(corpus.feature_matrix(assets.split.test)),
        )
        rows["visual_only"].append(
            evaluate_scorematrix(vis_scores, corpus.label_sets(assets.split.test), config.n_top)
        )

    bundle = ExperimentBundle(config_hash=config_hash, rows=rows)
    write_bundle(config.out_dir, bundle, table_name="metadata_comparison.csv")
    return bundle


def run_cross_metadata(config: ExperimentConfig) -> dict:
    """Train with each metadata kind, evaluate with each. Returns
    {"cells": {(train, test): aggregate}, "visual_only": aggregate}; the
    diagonal coincides exactly with run_metadata_comparison (same seeds and
    cache keys)."""
    corpus, _, config_hash, all_assets = _experiment_context(config)
    kinds = list(METADATA_KIND_NAMES)
    cell_reports: dict[tuple[str, str], list[EvalReport]] = {
        (tk, ek): [] for tk in kinds for ek in kinds
    }
    visual_reports: list[EvalReport] = []

    for assets in all_assets:
        trained = {}
        for tk in kinds:
            trained[tk] = assets.neighbor_model(tk)
        for tk in kinds:
            params, meta = trained[tk]
            for ek in kinds:
                _, report = assets.eval_neighbor_model(params, meta, ek)
                cell_reports[(tk, ek)].append(report)
        vis_model = _train_linear(
            assets,
            corpus.feature_matrix(assets.split.train),
            corpus.feature_matrix(assets.split.val),
            config.train,
        )
        vis_scores = ScoreMatrix(
            ids=np.array(assets.split.test),
            scores=vis_model.predict(corpus.feature_matrix(assets.split.test)),
        )
        visual_reports.append(
            evaluate_scorematrix(vis_scores, corpus.label_sets(assets.split.test), config.n_top)
        )

    result = {
        "config_hash": config_hash,
        "kinds": kinds,
        "cells": {f"{tk}->{ek}": aggregate_reports(reports)
                  for (tk, ek), reports in cell_reports.items()},
        "visual_only": aggregate_reports(visual_reports),
        "cell_reports": cell_reports,
    }
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cross_metadata.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["train\\test", *kinds])
        for tk in kinds:
            writer.writerow(
                [tk] + [format_cell(result["cells"][f"{tk}->{ek}"]["mAP_L"]) for ek in kinds]
            )
        writer.writerow(["visual_only", format_cell(result["visual_only"]["mAP_L"]), "", ""])
    with open(out / "cross_metadata.json", "w", encoding="utf-8") as f:
        json.dump(
            {k: v for k, v in result.items() if k != "cell_reports"},
            f, indent=2, sort_keys=True,
        )
    return result


def run_sweep(
    config: ExperimentConfig,
    m_grid: Sequence[int] | None = None,
    max_rank_grid: Sequence[int] | None = None,
    tau_grid: Sequence[int | None] | None = None,
) -> list[dict]:
    """Single-axis sweeps around the configured defaults; one trained model
    per feasible grid point, fixed seeds, mAPs recorded per point."""
    corpus, _, config_hash, all_assets = _experiment_context(config)
    points: list[tuple[str, object, int, int, int | None]] = []
    for m in m_grid or []:
        points.append(("m", m, m, config.max_rank, config.tau))
    for max_rank in max_rank_grid or []:
        points.append(("max_rank", max_rank, config.m, max_rank, config.tau))
    for tau in tau_grid or []:
        points.append(("tau", tau, config.m, config.max_rank, tau))
    if not points:
        points = [("m", config.m, config.m, config.max_rank, config.tau)]

    rows = []
    for axis, value, m, max_rank, tau in points:
        row = {"axis": axis, "value": value, "m": m, "max_rank": max_rank,
               "tau": tau, "status": "ok", "mAP_L": None, "mAP_I": None}
        if m < 1 or m > max_rank:
            row["status"] = "infeasible"
            rows.append(row)
            continue
        reports = []
        for assets in all_assets:
            params, meta = assets.neighbor_model(
                config.train_kind, m=m, max_rank=max_rank, tau=tau
            )
            _, report = assets.eval_neighbor_model(
                params, meta, config.test_kind, m=m, max_rank=max_rank, tau=tau
            )
            reports.append(report)
        agg = aggregate_reports(reports)
        row["mAP_L"] = agg["mAP_L"]["mean"]
        row["mAP_I"] = agg["mAP_I"]["mean"]
        rows.append(row)

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["axis", "value", "m", "max_rank", "tau", "status", "mAP_L", "mAP_I"])
        for row in rows:
            writer.writerow([row[c] for c in
                             ("axis", "value", "m", "max_rank", "tau", "status", "mAP_L", "mAP_I")])
    if config.emit_plots:
        _plot_sweep(out / "sweep.svg", rows)
    return rows


def split_vocabulary_overlap(
    vocabulary: Sequence[int], overlap_pct: float, seed: int
) -> tuple[set[int], set[int]]:
    """Two term sets sharing overlap_pct percent of the vocabulary: a seeded
    shared block plus disjoint halves of the remainder. 100 percent yields
    the full vocabulary twice; 0 percent yields disjoint halves."""
    if not (0.0 <= overlap_pct <= 100.0):
        raise ValidationError("overlap must be in [0, 100]")
    import random as _random

    terms = sorted(int(t) for t in vocabulary)
    _random.Random(seed).shuffle(terms)
    n_shared = round(overlap_pct / 100.0 * len(terms))
    shared = terms[:n_shared]
    rest = terms[n_shared:]
    half = len(rest) // 2
    train_vocab = set(shared) | set(rest[:half])
    test_vocab = set(shared) | set(rest[half:])
    return train_vocab, test_vocab


def run_vocab_overlap(config: ExperimentConfig, overlaps: Sequence[float]) -> list[dict]:
    """Train with one tag vocabulary, test with another sharing a controlled
    percentage of terms; emits mAP versus overlap (trend reported, not
    asserted)."""
    corpus, _, config_hash, all_assets = _experiment_context(config)
    rows = []
    for overlap in overlaps:
        reports = []
        vis_values = []
        for assets in all_assets:
            full = sorted(assets.tag_vocabulary())
            train_vocab, test_vocab = split_vocabulary_overlap(
                full, overlap, derive_seed(assets.split.seed, "overlap-shuffle")
            )
            params, meta = assets.neighbor_model(
                MetadataKind.TAGS.value, train_vocab=train_vocab, use_tag_vector=False
            )
            _, report = assets.eval_neighbor_model(
                params, meta, MetadataKind.TAGS.value, test_vocab=test_vocab
            )
            reports.append(report)
        agg = aggregate_reports(reports)
        rows.append(
            {"overlap_pct": float(overlap), "mAP_L": agg["mAP_L"]["mean"],
             "mAP_I": agg["mAP_I"]["mean"],
             "mAP_L_values": agg["mAP_L"]["values"]}
        )
    deltas = [rows[i + 1]["mAP_L"] - rows[i]["mAP_L"] for i in range(len(rows) - 1)]
    monotone = all(d >= 0 for d in deltas) if len(rows) > 1 else True

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "vocab_overlap.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["overlap_pct", "mAP_L", "mAP_I"])
        for row in rows:
            writer.writerow([row["overlap_pct"], row["mAP_L"], row["mAP_I"]])
        writer.writerow([])
        writer.writerow(["monotone_nondecreasing", monotone, ""])
    if config.emit_plots:
        _plot_xy(out / "vocab_overlap.svg", [r["overlap_pct"] for r in rows],
                 [r["mAP_L"] for r in rows], "overlap %", "mAP_L")
    return rows


def run_correlation_analysis(config: ExperimentConfig, k_max: int = 20) -> dict:
    """Per-kind neighbor-label correlation curves over the whole corpus
    (full vocabularies, rank depth k_max), written as CSV per kind."""
    corpus, _, config_hash, _assets = _experiment_context(config)
    ids = [rec.id for rec in corpus.images]
    cache = StageCache(Path(config.out_dir) / "cache") if config.use_cache else StageCache(None)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for kind in MetadataKind:
        if not any(len(rec.terms(kind)) for rec in corpus.images):
            logger.warning("metadata kind %s absent; correlation skipped", kind.value)
            continue
        key = {"stage": "nbrs", "backend": "jaccard", "corpus": config_hash,
               "pool": "all", "kind": kind.value, "vocab": "full", "M": k_max}
        lists = cache.neighbor_lists(
            key, lambda kind=kind: nb.build_neighbor_lists(corpus, ids, kind, k_max)
        )
        result = nb.neighbor_label_correlation(corpus, lists, k_max)
        results[kind.value] = result
        with open(out / f"correlation_{kind.value}.csv", "w", newline="",
                  encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "k", "probability", "base_rate"])
            for label, curve in sorted(result.curves.items()):
                for k_idx, prob in enumerate(curve, start=1):
                    writer.writerow([label, k_idx, repr(float(prob)),
                                     repr(result.base_rates[label])])
        if config.emit_plots:
            mean = result.mean_curve()
            _plot_xy(out / f"correlation_{kind.value}.svg",
                     list(range(1, k_max + 1)), mean.tolist(), "k",
                     "P(shared label)")
    return results


# ---------------------------------------------------------------------------
# optional plotting (SVG, no display)


def _matplotlib():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        return plt
    except Exception:  # pragma: no cover - matplotlib is optional
        logger.warning("matplotlib unavailable; plot skipped")
        return None


def _plot_xy(path, xs, ys, xlabel, ylabel):
    plt = _matplotlib()
    if plt is None:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_sweep(path, rows):
    plt = _matplotlib()
    if plt is None:
        return
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for axis in sorted({r["axis"] for r in rows}):
        pts = [(r["value"], r["mAP_L"]) for r in rows
               if r["axis"] == axis and r["status"] == "ok" and r["value"] is not None]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=axis)
    ax.set_xlabel("grid value")
    ax.set_ylabel("mAP_L")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
