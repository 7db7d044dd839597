"""Comparison systems: one-vs-all linear logistic models (tag-only,
visual-only, ground-truth upper bound), L2 feature k-NN label voting, and
score blending between an image and the visual-only scores of its metadata
neighbors. Logistic baselines run on the exact optimizer and loss of the
main model so report differences reflect inputs, not training machinery.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import model as model_mod
from .corpus import Corpus
from .metrics import ScoreMatrix, map_per_image, map_per_label
from .neighbors import NeighborList
from .optim import HistoryRow, TrainConfig, init_rmsprop_state, rmsprop_step
from .util import ValidationError, chunked, derive_seed

logger = logging.getLogger(__name__)


@dataclass
class LinearModel:
    """One-vs-all linear scorer: scores = x @ w + b."""

    w: np.ndarray  # (f, L)
    b: np.ndarray  # (L,)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.w + self.b

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}

    def copy(self) -> "LinearModel":
        return LinearModel(w=self.w.copy(), b=self.b.copy())


def train_logistic_ova(
    features: np.ndarray,
    labels: Sequence[Iterable[int]],
    config: TrainConfig,
    val_features: np.ndarray | None = None,
    val_labels: Sequence[Iterable[int]] | None = None,
    n_labels: int | None = None,
) -> tuple[LinearModel, list[HistoryRow]]:
    """One-vs-all logistic training with RMSProp, softplus loss, and L2 on
    the weight matrix (biases unregularized). Weights start at zero.

    With a validation set the best-on-validation snapshot is returned,
    mirroring the main model's protocol; otherwise the final epoch wins.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(labels):
        raise ValidationError("features must be (N, f) aligned with labels")
    if n_labels is None:
        n_labels = 1 + max((max(ls, default=-1) for ls in labels), default=-1)
    if n_labels < 1:
        raise ValidationError("no labels present")
    n, f = x.shape
    model = LinearModel(w=np.zeros((f, n_labels)), b=np.zeros(n_labels))
    pdict = model.as_dict()
    state = init_rmsprop_state(pdict)
    y_all = model_mod.label_sign_matrix(labels, n_labels)
    y_val = model_mod.label_sign_matrix(val_labels, n_labels) if val_labels is not None else None

    best = model.copy()
    best_metric = -np.inf
    history: list[HistoryRow] = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = list(range(n))
        random.Random(derive_seed(config.seed, "order", epoch)).shuffle(order)
        loss_sum = 0.0
        for rows in chunked(order, config.batch):
            rows = list(rows)
            xb = x[rows]
            scores = xb @ model.w + model.b
            loss, dscores = model_mod.batch_loss_and_grad(scores, y_all[rows])
            loss_sum += loss
            dscores /= len(rows)
            grads = {
                "w": xb.T @ dscores + config.l2 * model.w,
                "b": dscores.sum(axis=0),
            }
            rmsprop_step(pdict, grads, state, config.lr, config.rms_decay, config.rms_eps)
        val_map_l = val_map_i = float("nan")
        if val_features is not None and len(val_features):
            val_scores = ScoreMatrix(
                ids=np.arange(len(val_features)), scores=model.predict(val_features)
            )
            gt = [set(np.nonzero(row > 0)[0]) for row in y_val]
            val_map_l, _, _ = map_per_label(val_scores, gt)
            val_map_i, _, _ = map_per_image(val_scores, gt)
            metric = val_map_l if config.val_metric == "map_label" else val_map_i
            if metric > best_metric:
                best_metric = metric
                best = model.copy()
        else:
            best = model.copy()
        history.append(HistoryRow(epoch, loss_sum / n, val_map_l, val_map_i,
                                  time.perf_counter() - t0))
    return best, history


def upper_bound_features(corpus: Corpus, ids: Sequence[int]) -> np.ndarray:
    """Binary indicator matrix of ground-truth labels; the perfect input."""
    out = np.zeros((len(ids), corpus.n_labels))
    for row, image_id in enumerate(ids):
        for c in corpus.image(image_id).labels:
            out[row, c] = 1.0
    return out


def knn_vote(
    train_features: np.ndarray,
    train_labels: Sequence[Iterable[int]],
    query_features: np.ndarray,
    k: int,
    n_labels: int | None = None,
    train_ids: np.ndarray | None = None,
    query_ids: np.ndarray | None = None,
    chunk: int = 256,
) -> ScoreMatrix:
    """Label transfer by voting: each query's score for label c is the
    fraction of its k nearest training images (L2, ties by ascending id)
    carrying c."""
    xt = np.asarray(train_features, dtype=np.float64)
    xq = np.asarray(query_features, dtype=np.float64)
    n_train = xt.shape[0]
    if not (1 <= k <= n_train):
        raise ValidationError(f"k must be in [1, {n_train}], got {k}")
    if n_labels is None:
        n_labels = 1 + max(max(ls, default=-1) for ls in train_labels)
    if train_ids is None:
        train_ids = np.arange(n_train, dtype=np.int64)
    if query_ids is None:
        query_ids = np.arange(xq.shape[0], dtype=np.int64)
    label_matrix = np.zeros((n_train, n_labels))
    for row, ls in enumerate(train_labels):
        for c in ls:
            label_matrix[row, int(c)] = 1.0

    sq_t = np.einsum("ij,ij->i", xt, xt)
    scores = np.zeros((xq.shape[0], n_labels))
    for start in range(0, xq.shape[0], chunk):
        stop = min(start + chunk, xq.shape[0])
        block = xq[start:stop]
        d2 = np.einsum("ij,ij->i", block, block)[:, None] + sq_t[None, :] - 2.0 * block @ xt.T
        np.maximum(d2, 0.0, out=d2)
        for row in range(stop - start):
            order = np.lexsort((train_ids, d2[row]))[:k]
            scores[start + row] = label_matrix[order].mean(axis=0)
    return ScoreMatrix(ids=np.asarray(query_ids, dtype=np.int64), scores=scores)


def neighborhood_voting(
    own_scores: np.ndarray,
    neighbor_scores_list: Sequence[np.ndarray],
    alpha: float,
) -> np.ndarray:
    """Blend one image's scores with the mean of its neighbors' scores:
    alpha * own + (1 - alpha) * mean. An empty neighbor list returns own."""
    if not (0.0 <= alpha <= 1.0):
        raise ValidationError(f"alpha must be in [0, 1], got {alpha}")
    own = np.asarray(own_scores, dtype=np.float64)
    if not neighbor_scores_list:
        return own.copy()
    mean = np.mean(np.stack([np.asarray(s, dtype=np.float64) for s in neighbor_scores_list]),
                   axis=0)
    return alpha * own + (1.0 - alpha) * mean


def apply_neighborhood_voting(
    own: ScoreMatrix,
    neighbor_lists: Mapping[int, NeighborList],
    alpha: float,
) -> ScoreMatrix:
    """Matrix form of ``neighborhood_voting`` with neighbor scores looked up
    in the same (pool-wide) score matrix."""
    row_of = {int(i): r for r, i in enumerate(own.ids)}
    out = np.empty_like(own.scores)
    for row, image_id in enumerate(own.ids.tolist()):
        nl = neighbor_lists.get(image_id)
        nbr_rows = [row_of[int(j)] for j in nl.ids.tolist() if int(j) in row_of] if nl else []
        out[row] = neighborhood_voting(
            own.scores[row], [own.scores[r] for r in nbr_rows], alpha
        )
    return ScoreMatrix(ids=own.ids.copy(), scores=out, degenerate_ids=list(own.degenerate_ids))


DEFAULT_ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


def tune_voting_alpha(
    own_val: ScoreMatrix,
    val_neighbor_lists: Mapping[int, NeighborList],
    val_labels: Sequence[Iterable[int]],
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
) -> tuple[float, list[tuple[float, float]]]:
    """Pick the blend weight maximizing validation per-label mAP over a fixed
    grid (ties keep the lowest alpha). Returns (alpha, [(alpha, mAP_L)...])."""
    table = []
    best_alpha, best = None, -np.inf
    for alpha in grid:
        blended = apply_neighborhood_voting(own_val, val_neighbor_lists, alpha)
        value, _, _ = map_per_label(blended, val_labels)
        table.append((float(alpha), value))
        if value > best:
            best = value
            best_alpha = float(alpha)
    logger.debug("voting alpha grid: %s -> alpha=%s", table, best_alpha)
    return best_alpha, table
