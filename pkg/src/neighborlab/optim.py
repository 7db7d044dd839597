"""RMSProp training loop for the neighbor-pooling model.

Each epoch shuffles the training ids (seeded), walks minibatches, draws one
neighborhood sample per example (seed mixed from the run seed, epoch, and
image id so batch order and parallelism never change the draws), accumulates
mean data loss plus L2 gradients, and applies RMSProp. After every epoch the
validation pool is scored with the evaluation sample count and the snapshot
with the best validation metric is kept.
"""

from __future__ import annotations

import csv
import logging
import random
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as model_mod
from .corpus import Corpus, MetadataKind, SplitSpec
from .metrics import ScoreMatrix, map_per_image, map_per_label
from .model import ModelParams
from .neighbors import NeighborhoodSpec, NeighborList, candidate_count, sample_neighborhoods
from .util import ValidationError, chunked, derive_seed

logger = logging.getLogger(__name__)

VAL_METRICS = ("map_label", "map_image")


@dataclass
class TrainConfig:
    """Training hyperparameters (defaults: fixed learning rate 1e-4 with
    RMSProp, L2 3e-3, minibatch 50, 10 epochs, hidden width 500, dropout 0.5,
    best-on-validation snapshot by per-label mAP)."""

    lr: float = 1e-4
    l2: float = 3e-3
    h: int = 500
    batch: int = 50
    epochs: int = 10
    dropout_p: float = 0.5
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    seed: int = 0
    val_metric: str = "map_label"

    def __post_init__(self):
        if min(self.lr, self.l2, self.rms_decay, self.rms_eps) < 0:
            raise ValidationError("negative training constant")
        if self.batch < 1 or self.h < 1 or self.epochs < 0:
            raise ValidationError("batch and h must be >= 1, epochs >= 0")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValidationError("dropout_p must be in [0, 1)")
        if self.val_metric not in VAL_METRICS:
            raise ValidationError(f"val_metric must be one of {VAL_METRICS}")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_map_label: float
    val_map_image: float
    wall_seconds: float


def save_history(path, rows: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_mAP_L", "val_mAP_I", "wall_seconds"])
        for row in rows:
            writer.writerow(
                [row.epoch, repr(row.train_loss), repr(row.val_map_label),
                 repr(row.val_map_image), f"{row.wall_seconds:.3f}"]
            )


# ---------------------------------------------------------------------------
# RMSProp


def init_rmsprop_state(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def rmsprop_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: Mapping[str, np.ndarray],
    lr: float,
    decay: float,
    eps: float,
) -> tuple[Mapping[str, np.ndarray], Mapping[str, np.ndarray]]:
    """In-place update: cache <- decay*cache + (1-decay)*g^2;
    p <- p - lr * g / (sqrt(cache) + eps)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise ValidationError(
                f"non-finite gradient in {name}: {bad}/{g.size} entries "
                f"(|g|max={np.nanmax(np.abs(g)):.3e})"
            )
        cache = state[name]
        cache *= decay
        cache += (1.0 - decay) * g * g
        p -= lr * g / (np.sqrt(cache) + eps)
    return params, state


# ---------------------------------------------------------------------------
# tag-vector extension support


class TagVectorizer:
    """Binary indicator vectors over a fixed tag vocabulary subset."""

    def __init__(self, vocab: Iterable[int], kind: MetadataKind = MetadataKind.TAGS):
        self.kind = kind
        self.vocab_ids = sorted(int(t) for t in set(vocab))
        self.width = len(self.vocab_ids)
        self._col = {t: i for i, t in enumerate(self.vocab_ids)}

    def vector(self, record) -> np.ndarray:
        v = np.zeros(self.width)
        for t in record.terms(self.kind).tolist():
            col = self._col.get(t)
            if col is not None:
                v[col] = 1.0
        return v

    def matrix(self, corpus: Corpus, ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.vector(corpus.image(i)) for i in ids]) if len(ids) else \
            np.zeros((0, self.width))


# ---------------------------------------------------------------------------
# bulk evaluation


def _sample_count(spec: NeighborhoodSpec) -> int:
    return min(spec.samples_test, candidate_count(spec.max_rank, spec.m))


def evaluate_scores(
    params: ModelParams,
    corpus: Corpus,
    ids: Sequence[int],
    neighbor_lists: Mapping[int, NeighborList],
    spec: NeighborhoodSpec,
    tag_vectorizer: TagVectorizer | None = None,
    chunk: int = 256,
) -> ScoreMatrix:
    """Neighborhood-averaged evaluation scores for ``ids``.

    Per image, ``spec.samples_test`` distinct neighborhoods are drawn with a
    seed mixed from ``spec.seed`` and the image id, then forward scores are
    averaged (never any dropout). Images without a usable neighbor list are
    scored by the visual-only pathway (zero neighbor hidden state) when
    ``spec.allow_degenerate`` is set, and flagged.
    """
    ids = [int(i) for i in ids]
    normal: list[int] = []
    degenerate: list[int] = []
    samples: dict[int, list[tuple[int, ...]]] = {}
    for image_id in ids:
        nl = neighbor_lists.get(image_id)
        if nl is None or len(nl) < spec.m:
            if not spec.allow_degenerate:
                raise ValidationError(
                    f"image {image_id} has no usable neighbor list "
                    f"(need {spec.m} neighbors) and degenerate mode is off"
                )
            degenerate.append(image_id)
            continue
        normal.append(image_id)
        samples[image_id] = sample_neighborhoods(
            nl, spec.m, spec.samples_test, derive_seed(spec.seed, "eval", image_id)
        )

    n_labels = params.n_labels
    out_rows: dict[int, np.ndarray] = {}

    for block in chunked(normal, chunk):
        x_rows = []
        z_rows = []
        tag_rows = []
        counts = []
        for image_id in block:
            subs = samples[image_id]
            counts.append(len(subs))
            feats = corpus.image(image_id).features.astype(np.float64)
            tag = tag_vectorizer.vector(corpus.image(image_id)) if tag_vectorizer else None
            for subset in subs:
                x_rows.append(feats)
                z_rows.append(corpus.feature_matrix(subset).astype(np.float64))
                if tag is not None:
                    tag_rows.append(tag)
        x = np.stack(x_rows)
        z = np.stack(z_rows)
        tag = np.stack(tag_rows) if tag_rows else None
        scores, _ = model_mod.forward_batch(params, x, z, tag=tag)
        offset = 0
        for image_id, count in zip(block, counts):
            out_rows[image_id] = scores[offset : offset + count].mean(axis=0)
            offset += count

    if degenerate:
        x = corpus.feature_matrix(degenerate).astype(np.float64)
        tag = tag_vectorizer.matrix(corpus, degenerate) if tag_vectorizer else None
        scores, _ = model_mod.forward_batch(params, x, None, tag=tag)
        for row, image_id in enumerate(degenerate):
            out_rows[image_id] = scores[row]
        logger.debug("%d images scored in degenerate (visual-only) mode", len(degenerate))

    matrix = np.stack([out_rows[i] for i in ids]) if ids else np.zeros((0, n_labels))
    return ScoreMatrix(ids=np.array(ids, dtype=np.int64), scores=matrix,
                       degenerate_ids=degenerate)


# ---------------------------------------------------------------------------
# training


def _gather_train_batch(
    corpus: Corpus,
    batch_ids: Sequence[int],
    neighbor_lists: Mapping[int, NeighborList],
    spec: NeighborhoodSpec,
    config: TrainConfig,
    epoch: int,
    tag_vectorizer: TagVectorizer | None,
):
    """Split a minibatch into the full-m group and the degenerate group and
    assemble feature arrays plus per-example dropout masks."""
    full_ids: list[int] = []
    deg_ids: list[int] = []
    z_rows = []
    for image_id in batch_ids:
        nl = neighbor_lists.get(image_id)
        if nl is None or len(nl) < spec.m:
            if not spec.allow_degenerate:
                raise ValidationError(
                    f"training image {image_id} has no usable neighbor list"
                )
            deg_ids.append(image_id)
            continue
        (subset,) = sample_neighborhoods(
            nl, spec.m, 1, derive_seed(config.seed, "sample", epoch, image_id)
        )
        full_ids.append(image_id)
        z_rows.append(corpus.feature_matrix(subset).astype(np.float64))

    def group(ids, z):
        if not ids:
            return None
        x = corpus.feature_matrix(ids).astype(np.float64)
        tag = tag_vectorizer.matrix(corpus, ids) if tag_vectorizer else None
        if config.dropout_p > 0.0:
            mask_x = np.empty((len(ids), config.h))
            mask_z = np.empty((len(ids), config.h))
            for row, image_id in enumerate(ids):
                rng = np.random.default_rng(derive_seed(config.seed, "dropout", epoch, image_id))
                mask_x[row], mask_z[row] = model_mod.make_dropout_masks(
                    config.h, config.dropout_p, rng
                )
            masks = (mask_x, mask_z)
        else:
            masks = None
        y = model_mod.label_sign_matrix(corpus.label_sets(ids), corpus.n_labels)
        return x, z, tag, masks, y

    z_full = np.stack(z_rows) if z_rows else None
    return group(full_ids, z_full), group(deg_ids, None)


def train(
    corpus: Corpus,
    split: SplitSpec,
    neighbor_lists: Mapping[int, NeighborList],
    spec: NeighborhoodSpec,
    config: TrainConfig,
    tag_vectorizer: TagVectorizer | None = None,
) -> tuple[ModelParams, list[HistoryRow]]:
    """Train the neighbor-pooling model; returns the best-on-validation
    snapshot and the per-epoch history.

    ``neighbor_lists`` must cover the train and val ids (train-pool lists for
    training images, val-pool lists for validation images) unless
    ``spec.allow_degenerate`` is set. With no validation split the final
    epoch's parameters are returned.
    """
    if not split.train:
        raise ValidationError("empty train split")
    if spec.samples_train != 1:
        raise ValidationError("training draws exactly one neighborhood sample per forward pass")
    ext = tag_vectorizer.width if tag_vectorizer else 0
    params = model_mod.init_params(
        corpus.d, config.h, corpus.n_labels, derive_seed(config.seed, "init"), ext_width=ext
    )
    pdict = params.as_dict()
    state = init_rmsprop_state(pdict)

    best_params = params.copy()
    best_metric = -np.inf
    history: list[HistoryRow] = []
    metric_key = config.val_metric

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = list(split.train)
        random.Random(derive_seed(config.seed, "order", epoch)).shuffle(order)
        loss_sum = 0.0
        for batch_ids in chunked(order, config.batch):
            b = len(batch_ids)
            grads = model_mod.zeros_like_params(params)
            for group in _gather_train_batch(
                corpus, batch_ids, neighbor_lists, spec, config, epoch, tag_vectorizer
            ):
                if group is None:
                    continue
                x, z, tag, masks, y = group
                scores, cache = model_mod.forward_batch(params, x, z, tag=tag, masks=masks)
                loss, dscores = model_mod.batch_loss_and_grad(scores, y)
                loss_sum += loss
                g = model_mod.backward_batch(params, cache, dscores / b)
                for name in model_mod.PARAM_NAMES:
                    getattr(grads, name).__iadd__(getattr(g, name))
            _, l2_grads = model_mod.l2_term(params, config.l2)
            for name in model_mod.PARAM_NAMES:
                getattr(grads, name).__iadd__(getattr(l2_grads, name))
            rmsprop_step(pdict, grads.as_dict(), state, config.lr, config.rms_decay,
                         config.rms_eps)

        train_loss = loss_sum / len(split.train)
        val_map_l = val_map_i = float("nan")
        if split.val:
            val_scores = evaluate_scores(
                params, corpus, split.val, neighbor_lists, spec, tag_vectorizer
            )
            gt = corpus.label_sets(split.val)
            val_map_l, _, _ = map_per_label(val_scores, gt)
            val_map_i, _, _ = map_per_image(val_scores, gt)
            metric = val_map_l if metric_key == "map_label" else val_map_i
            if metric > best_metric:
                best_metric = metric
                best_params = params.copy()
        else:
            best_params = params.copy()
        wall = time.perf_counter() - t0
        history.append(HistoryRow(epoch, train_loss, val_map_l, val_map_i, wall))
        logger.info(
            "epoch %d: train_loss=%.5f val_mAP_L=%.2f val_mAP_I=%.2f (%.1fs)",
            epoch, train_loss, val_map_l, val_map_i, wall,
        )

    return best_params, history
