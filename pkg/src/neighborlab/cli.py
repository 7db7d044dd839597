"""Command-line interface.

Subcommands: gen-synth, validate, build-neighbors, train, evaluate,
baselines, sweep, overlap, cross-metadata, correlate, report. Exit codes:
0 success, 1 validation/format failure, 2 runtime error; errors are also
emitted as a JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import harness, neighbors as nb, optim
from .corpus import (
    MetadataKind,
    corpus_stats,
    load_corpus_dir,
    load_split,
    make_splits,
    save_split,
    select_tag_vocabulary,
    filter_images,
)
from .metrics import (
    EvalReport,
    ScoreMatrix,
    evaluate_scorematrix,
    load_report_json,
    save_report_json,
)
from .model import load_checkpoint, save_checkpoint
from .synthgen import SynthConfig, write_synth_corpus
from .util import FormatError, NeighborlabError, ValidationError

METADATA_CHOICES = ("tags", "sets", "groups")


def _experiment_config(args) -> harness.ExperimentConfig:
    overrides = {}
    for name in ("corpus_dir", "out_dir"):
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name] = value
    if args.config:
        cfg = harness.ExperimentConfig.from_file(args.config, overrides)
    else:
        if "corpus_dir" not in overrides:
            raise ValidationError("--corpus or --config is required")
        cfg = harness.ExperimentConfig(**overrides)
    if getattr(args, "seed", None) is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.split_seed = args.seed if args.split_seed is None else cfg.split_seed
    if getattr(args, "split_seed", None) is not None:
        cfg.split_seed = args.split_seed
    for name in ("n_splits", "tau", "m", "max_rank", "train_kind", "test_kind",
                 "knn_k", "use_tag_vector", "emit_plots"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "epochs", None) is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    if getattr(args, "hidden", None) is not None:
        cfg.train = replace(cfg.train, h=args.hidden)
    return cfg


def _load_pool(args, corpus):
    split = load_split(args.split)
    ids = {"train": split.train, "val": split.val, "test": split.test}[args.pool]
    return split, ids


def cmd_gen_synth(args) -> int:
    cfg = SynthConfig(
        n_images=args.n, n_topics=args.topics, n_labels=args.labels, d=args.dim,
        seed=args.seed, ambiguous_fraction=args.rho,
    )
    if args.synth_config:
        with open(args.synth_config, "r", encoding="utf-8") as f:
            cfg = SynthConfig.from_dict(json.load(f))
    corpus, _ = write_synth_corpus(cfg, args.out)
    print(json.dumps({"out": str(args.out), "n_images": len(corpus),
                      "n_labels": corpus.n_labels, "d": corpus.d}))
    return 0


def cmd_validate(args) -> int:
    corpus = load_corpus_dir(args.corpus)
    stats = corpus_stats(corpus)
    filtered = filter_images(corpus)
    stats["n_images_after_filter"] = len(filtered)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def cmd_make_splits(args) -> int:
    corpus = filter_images(load_corpus_dir(args.corpus))
    splits = make_splits(corpus, tuple(args.fractions), args.n_splits, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, split in enumerate(splits):
        save_split(out / f"split_{i}.json", split)
    print(json.dumps({"n_splits": len(splits), "sizes": [len(splits[0].train),
                      len(splits[0].val), len(splits[0].test)]}))
    return 0


def cmd_build_neighbors(args) -> int:
    corpus = filter_images(load_corpus_dir(args.corpus))
    split, ids = _load_pool(args, corpus)
    if args.kind == "visual":
        lists = nb.build_visual_neighbor_lists(corpus, ids, args.max_rank)
    else:
        kind = MetadataKind(args.kind)
        vocab = None
        if args.tau and kind is MetadataKind.TAGS:
            vocab = select_tag_vocabulary(corpus, split.train, kind, args.tau)
        lists = nb.build_neighbor_lists(corpus, ids, kind, args.max_rank, vocab)
    nb.save_neighbor_lists(args.out, lists)
    print(json.dumps({"out": str(args.out), "n_queries": len(lists),
                      "max_rank": args.max_rank}))
    return 0


def cmd_train(args) -> int:
    corpus = filter_images(load_corpus_dir(args.corpus))
    split = load_split(args.split)
    lists = nb.load_neighbor_lists(args.neighbors)
    if args.val_neighbors:
        lists.update(nb.load_neighbor_lists(args.val_neighbors))
    spec = nb.NeighborhoodSpec(m=args.m, max_rank=args.max_rank, seed=args.seed,
                               allow_degenerate=True)
    cfg = optim.TrainConfig(h=args.hidden, epochs=args.epochs, seed=args.seed,
                            lr=args.lr, l2=args.l2)
    vectorizer = None
    if args.tag_vector:
        vocab = select_tag_vocabulary(
            corpus, split.train, MetadataKind.TAGS,
            args.tau or len(corpus.vocab[MetadataKind.TAGS]),
        )
        vectorizer = optim.TagVectorizer(vocab)
    params, history = optim.train(corpus, split, lists, spec, cfg, vectorizer)
    save_checkpoint(args.out, params, {"train_config": asdict(cfg)})
    optim.save_history(str(args.out) + ".history.csv", history)
    last = history[-1] if history else None
    print(json.dumps({"out": str(args.out), "epochs": len(history),
                      "val_mAP_L": last.val_map_label if last else None}))
    return 0


def cmd_evaluate(args) -> int:
    corpus = filter_images(load_corpus_dir(args.corpus))
    _, ids = _load_pool(args, corpus)
    params, _ = load_checkpoint(args.checkpoint)
    lists = nb.load_neighbor_lists(args.neighbors)
    spec = nb.NeighborhoodSpec(m=args.m, max_rank=args.max_rank, seed=args.seed,
                               samples_test=args.samples, allow_degenerate=True)
    sm = optim.evaluate_scores(params, corpus, ids, lists, spec)
    report = evaluate_scorematrix(sm, corpus.label_sets(ids), args.n_top)
    save_report_json(args.out, report, {"pool": args.pool})
    print(json.dumps(report.metric_values(), indent=2, sort_keys=True))
    return 0


def cmd_baselines(args) -> int:
    cfg = _experiment_config(args)
    bundle = harness.run_annotation_experiment(cfg)
    print(json.dumps({name: agg["mAP_L"]["mean"] for name, agg in
                      bundle.aggregate().items()}, indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    rows = harness.run_sweep(
        cfg,
        m_grid=args.m_grid,
        max_rank_grid=args.max_rank_grid,
        tau_grid=args.tau_grid,
    )
    print(json.dumps(rows, indent=2))
    return 0


def cmd_overlap(args) -> int:
    cfg = _experiment_config(args)
    rows = harness.run_vocab_overlap(cfg, args.overlaps)
    print(json.dumps(rows, indent=2))
    return 0


def cmd_cross_metadata(args) -> int:
    cfg = _experiment_config(args)
    result = harness.run_cross_metadata(cfg)
    print(json.dumps({"cells": {k: v["mAP_L"]["mean"] for k, v in result["cells"].items()},
                      "visual_only": result["visual_only"]["mAP_L"]["mean"]},
                     indent=2, sort_keys=True))
    return 0


def cmd_correlate(args) -> int:
    cfg = _experiment_config(args)
    results = harness.run_correlation_analysis(cfg, args.k_max)
    summary = {kind: {"mean_curve": [None if np.isnan(v) else round(float(v), 4)
                                     for v in res.mean_curve()]}
               for kind, res in results.items()}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        report, _ = load_report_json(path)
        reports.append(report)
    agg = harness.aggregate_reports(reports)
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="", encoding="utf-8") as f:
            writer = _csv.writer(f)
            writer.writerow(["metric", "mean", "std", "values"])
            for metric, cell in agg.items():
                writer.writerow([metric, cell["mean"], cell["std"],
                                 " ".join(f"{v:.4f}" for v in cell["values"])])
    print(json.dumps({m: harness.format_cell(c) for m, c in agg.items()},
                     indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neighborlab",
        description="Metadata-neighborhood multilabel annotation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic topic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=6000)
    p.add_argument("--topics", type=int, default=12)
    p.add_argument("--labels", type=int, default=24)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho", type=float, default=0.3, help="ambiguous fraction")
    p.add_argument("--synth-config", help="JSON file overriding all knobs")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("validate", help="validate a corpus and print statistics")
    p.add_argument("--corpus", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("make-splits", help="write seeded train/val/test splits")
    p.add_argument("--corpus", required=True)
    p.add_argument("--fractions", type=float, nargs="+", default=[0.6, 0.2])
    p.add_argument("--n-splits", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_splits)

    p = sub.add_parser("build-neighbors", help="top-M neighbor lists for a pool")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--pool", choices=["train", "val", "test"], default="test")
    p.add_argument("--kind", choices=[*METADATA_CHOICES, "visual"], default="tags")
    p.add_argument("--tau", type=int)
    p.add_argument("--max-rank", type=int, default=6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_neighbors)

    p = sub.add_parser("train", help="train the neighbor-pooling model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--neighbors", required=True, help="train-pool neighbor lists")
    p.add_argument("--val-neighbors", help="val-pool neighbor lists")
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--max-rank", type=int, default=6)
    p.add_argument("--tau", type=int)
    p.add_argument("--hidden", type=int, default=500)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--l2", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tag-vector", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a pool and write a metric report")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--pool", choices=["train", "val", "test"], default="test")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--neighbors", required=True)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--max-rank", type=int, default=6)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--n-top", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    def experiment_parser(name, help_text):
        q = sub.add_parser(name, help=help_text)
        q.add_argument("--config", help="experiment config JSON")
        q.add_argument("--corpus", dest="corpus_dir")
        q.add_argument("--out", dest="out_dir", required=True)
        q.add_argument("--seed", type=int)
        q.add_argument("--split-seed", type=int)
        q.add_argument("--n-splits", type=int)
        q.add_argument("--tau", type=int)
        q.add_argument("--m", type=int)
        q.add_argument("--max-rank", type=int)
        q.add_argument("--train-kind", choices=METADATA_CHOICES)
        q.add_argument("--test-kind", choices=METADATA_CHOICES)
        q.add_argument("--epochs", type=int)
        q.add_argument("--hidden", type=int)
        q.add_argument("--knn-k", type=int)
        q.add_argument("--use-tag-vector", action="store_const", const=True, default=None)
        q.add_argument("--emit-plots", action="store_const", const=True, default=None)
        return q

    p = experiment_parser("baselines", "run the full annotation benchmark table")
    p.set_defaults(func=cmd_baselines)

    p = experiment_parser("sweep", "sweep m / max-rank / tau around the defaults")
    p.add_argument("--m-grid", type=int, nargs="*", default=None)
    p.add_argument("--max-rank-grid", type=int, nargs="*", default=None)
    p.add_argument("--tau-grid", type=int, nargs="*", default=None)
    p.set_defaults(func=cmd_sweep)

    p = experiment_parser("overlap", "vocabulary-overlap generalization curve")
    p.add_argument("--overlaps", type=float, nargs="+", default=[0, 25, 50, 75, 100])
    p.set_defaults(func=cmd_overlap)

    p = experiment_parser("cross-metadata", "train/test metadata kind grid")
    p.set_defaults(func=cmd_cross_metadata)

    p = experiment_parser("correlate", "neighbor-label correlation curves")
    p.add_argument("--k-max", type=int, default=20)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("report", help="aggregate metric reports (mean +- std)")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FormatError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "stage": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except NeighborlabError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "stage": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as exc:  # runtime failures keep a machine-readable trail
        json.dump({"error": type(exc).__name__, "message": str(exc),
                   "stage": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
