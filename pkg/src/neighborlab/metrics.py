"""Ranking metrics for multilabel annotation.

Covers fixed-size top-n label assignment, overall (per-image) and per-label
precision/recall, non-interpolated average precision with deterministic
tie-breaking (ties in score resolve by ascending id), per-label and
per-image mAP, PR curves, and per-label AP comparisons. All reported values
are percentages in [0, 100]; ``average_precision`` itself returns a fraction.
Labels with no positive item are excluded from per-label means and counted.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np

from .util import FormatError, ValidationError

logger = logging.getLogger(__name__)

SCORES_MAGIC = b"NLSM"
SCORES_VERSION = 1


@dataclass
class ScoreMatrix:
    """Dense per-image-per-label scores for a pool of images."""

    ids: np.ndarray  # (N,) image ids
    scores: np.ndarray  # (N, L) float64
    degenerate_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != self.ids.shape[0]:
            raise ValidationError("scores must be (N, L) aligned with ids")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("duplicate ids in score matrix")
        if not np.all(np.isfinite(self.scores)):
            raise ValidationError("non-finite scores")

    @property
    def n_labels(self) -> int:
        return self.scores.shape[1]

    def row(self, image_id: int) -> np.ndarray:
        pos = np.nonzero(self.ids == image_id)[0]
        if not len(pos):
            raise ValidationError(f"id {image_id} not in score matrix")
        return self.scores[pos[0]]


def save_score_matrix(path, sm: ScoreMatrix) -> None:
    with open(path, "wb") as f:
        f.write(SCORES_MAGIC)
        f.write(
            struct.pack(
                "<IQIQ", SCORES_VERSION, sm.ids.shape[0], sm.n_labels, len(sm.degenerate_ids)
            )
        )
        f.write(np.ascontiguousarray(sm.ids, dtype="<i8").tobytes())
        f.write(np.array(sm.degenerate_ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(sm.scores, dtype="<f8").tobytes())


def load_score_matrix(path) -> ScoreMatrix:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SCORES_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, n, n_labels, n_deg = struct.unpack("<IQIQ", f.read(24))
        if version != SCORES_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        ids = np.frombuffer(f.read(n * 8), dtype="<i8").copy()
        deg = np.frombuffer(f.read(n_deg * 8), dtype="<i8")
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != n * n_labels:
        raise FormatError(f"{path}: truncated score data")
    return ScoreMatrix(
        ids=ids, scores=data.reshape(n, n_labels).copy(), degenerate_ids=[int(i) for i in deg]
    )


# ---------------------------------------------------------------------------
# top-n assignment and precision/recall


def _scores_array(scores) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(scores, ScoreMatrix):
        return scores.scores, scores.ids
    arr = np.asarray(scores, dtype=np.float64)
    return arr, np.arange(arr.shape[0], dtype=np.int64)


def topn_assign(scores, n: int) -> list[frozenset[int]]:
    """Per image, the n highest-scoring labels; score ties break by ascending
    label id."""
    arr, _ = _scores_array(scores)
    n_labels = arr.shape[1]
    if not (1 <= n <= n_labels):
        raise ValidationError(f"n must be in [1, {n_labels}], got {n}")
    label_idx = np.arange(n_labels)
    out = []
    for row in arr:
        order = np.lexsort((label_idx, -row))
        out.append(frozenset(int(c) for c in order[:n]))
    return out


@dataclass
class PrecisionRecall:
    """Top-n precision/recall, overall (per-image) and label-averaged, as
    percentages."""

    prec_image: float
    rec_image: float
    prec_label: float
    rec_label: float
    per_label_precision: np.ndarray
    per_label_recall: np.ndarray
    label_positives: np.ndarray
    n_labels_evaluated: int
    n_never_predicted: int


def precision_recall(
    predictions: Sequence[Iterable[int]],
    ground_truth: Sequence[Iterable[int]],
    n_labels: int,
) -> PrecisionRecall:
    """Counting metrics over predicted label sets.

    Per-label means run over labels with at least one positive image; a
    label that is never predicted contributes precision 0 (the count of such
    labels is reported and logged).
    """
    if len(predictions) != len(ground_truth):
        raise ValidationError("predictions and ground truth differ in length")
    tp = np.zeros(n_labels, dtype=np.int64)
    pred_count = np.zeros(n_labels, dtype=np.int64)
    pos_count = np.zeros(n_labels, dtype=np.int64)
    total_inter = 0
    total_pred = 0
    total_gt = 0
    for pred, gt in zip(predictions, ground_truth):
        pred = set(int(c) for c in pred)
        gt = set(int(c) for c in gt)
        if not gt:
            raise ValidationError("every image needs at least one ground-truth label")
        inter = pred & gt
        total_inter += len(inter)
        total_pred += len(pred)
        total_gt += len(gt)
        for c in pred:
            pred_count[c] += 1
        for c in gt:
            pos_count[c] += 1
        for c in inter:
            tp[c] += 1

    with np.errstate(invalid="ignore"):
        per_prec = np.where(pred_count > 0, tp / np.maximum(pred_count, 1), 0.0)
        per_rec = np.where(pos_count > 0, tp / np.maximum(pos_count, 1), np.nan)
    evaluated = pos_count > 0
    never_predicted = int(np.sum(evaluated & (pred_count == 0)))
    if never_predicted:
        logger.debug("%d labels with positives were never predicted", never_predicted)
    return PrecisionRecall(
        prec_image=100.0 * total_inter / total_pred if total_pred else 0.0,
        rec_image=100.0 * total_inter / total_gt,
        prec_label=100.0 * float(per_prec[evaluated].mean()) if evaluated.any() else 0.0,
        rec_label=100.0 * float(per_rec[evaluated].mean()) if evaluated.any() else 0.0,
        per_label_precision=100.0 * per_prec,
        per_label_recall=100.0 * per_rec,
        label_positives=pos_count,
        n_labels_evaluated=int(evaluated.sum()),
        n_never_predicted=never_predicted,
    )


# ---------------------------------------------------------------------------
# average precision and mAP


def average_precision(relevance: Iterable[bool]) -> float:
    """Non-interpolated AP of an already-ranked relevance list, in [0, 1]."""
    rel = np.asarray(list(relevance), dtype=bool)
    n_relevant = int(rel.sum())
    if n_relevant == 0:
        raise ValidationError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.sum((hits / ranks)[rel]) / n_relevant)


def rank_items(scores: np.ndarray, tie_ids: np.ndarray) -> np.ndarray:
    """Order by descending score, breaking exact ties by ascending id."""
    return np.lexsort((tie_ids, -scores))


def map_per_label(scores, label_sets: Sequence[Iterable[int]]) -> tuple[float, np.ndarray, int]:
    """mAP over labels, ranking images within each label's score column.

    Returns (mAP_L percent, per-label AP percents with NaN for labels that
    have no positive image, count of such skipped labels).
    """
    arr, ids = _scores_array(scores)
    n, n_labels = arr.shape
    relevant = np.zeros((n, n_labels), dtype=bool)
    for row, labels in enumerate(label_sets):
        for c in labels:
            relevant[row, int(c)] = True
    per_label = np.full(n_labels, np.nan)
    for c in range(n_labels):
        if not relevant[:, c].any():
            continue
        order = rank_items(arr[:, c], ids)
        per_label[c] = 100.0 * average_precision(relevant[order, c])
    skipped = int(np.isnan(per_label).sum())
    value = float(np.nanmean(per_label)) if skipped < n_labels else float("nan")
    return value, per_label, skipped


def map_per_image(scores, label_sets: Sequence[Iterable[int]]) -> tuple[float, np.ndarray, int]:
    """mAP over images, ranking labels within each image's score row."""
    arr, _ = _scores_array(scores)
    n, n_labels = arr.shape
    label_idx = np.arange(n_labels, dtype=np.int64)
    per_image = np.full(n, np.nan)
    for row, labels in enumerate(label_sets):
        rel = np.zeros(n_labels, dtype=bool)
        for c in labels:
            rel[int(c)] = True
        if not rel.any():
            continue
        order = rank_items(arr[row], label_idx)
        per_image[row] = 100.0 * average_precision(rel[order])
    skipped = int(np.isnan(per_image).sum())
    value = float(np.nanmean(per_image)) if skipped < n else float("nan")
    return value, per_image, skipped


def pr_curve(scores: np.ndarray, relevance: np.ndarray, tie_ids=None) -> np.ndarray:
    """One (recall, precision) point per rank; recall is nondecreasing.

    The step-rule area under the curve equals ``average_precision`` of the
    same ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance, dtype=bool)
    if tie_ids is None:
        tie_ids = np.arange(len(scores), dtype=np.int64)
    n_relevant = int(rel.sum())
    if n_relevant == 0:
        raise ValidationError("pr_curve needs at least one positive")
    order = rank_items(scores, np.asarray(tie_ids))
    ranked = rel[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    recall = hits / n_relevant
    precision = hits / ranks
    return np.column_stack([recall, precision])


def pr_curve_area(curve: np.ndarray) -> float:
    """Step-rule area: sum over ranks of (recall_k - recall_{k-1}) * prec_k."""
    recall = curve[:, 0]
    precision = curve[:, 1]
    deltas = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(deltas * precision))


# ---------------------------------------------------------------------------
# report bundle


@dataclass
class EvalReport:
    """Metric bundle for one score matrix: Table-style columns plus the
    per-label AP breakdown (all percentages)."""

    n: int
    map_label: float
    map_image: float
    rec_label: float
    prec_label: float
    rec_image: float
    prec_image: float
    per_label_ap: list[float | None]
    label_positives: list[int]
    n_labels_skipped: int
    n_images_skipped: int
    n_never_predicted: int
    n_degenerate: int = 0

    METRIC_COLUMNS = ("mAP_L", "mAP_I", "Rec_L", "Prec_L", "Rec_I", "Prec_I")

    def metric_values(self) -> dict[str, float]:
        return {
            "mAP_L": self.map_label,
            "mAP_I": self.map_image,
            "Rec_L": self.rec_label,
            "Prec_L": self.prec_label,
            "Rec_I": self.rec_image,
            "Prec_I": self.prec_image,
        }

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_label_ap"] = [None if v is None or np.isnan(v) else float(v)
                               for v in self.per_label_ap]
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        return cls(**obj)


def evaluate_scorematrix(
    sm: ScoreMatrix, label_sets: Sequence[Iterable[int]], n: int = 3
) -> EvalReport:
    """Full metric bundle: top-n precision/recall plus both mAP flavors."""
    if len(label_sets) != len(sm.ids):
        raise ValidationError("label sets must align with score rows")
    preds = topn_assign(sm, n)
    pr = precision_recall(preds, label_sets, sm.n_labels)
    map_l, per_label_ap, skipped_l = map_per_label(sm, label_sets)
    map_i, _, skipped_i = map_per_image(sm, label_sets)
    return EvalReport(
        n=n,
        map_label=map_l,
        map_image=map_i,
        rec_label=pr.rec_label,
        prec_label=pr.prec_label,
        rec_image=pr.rec_image,
        prec_image=pr.prec_image,
        per_label_ap=[None if np.isnan(v) else float(v) for v in per_label_ap],
        label_positives=[int(c) for c in pr.label_positives],
        n_labels_skipped=skipped_l,
        n_images_skipped=skipped_i,
        n_never_predicted=pr.n_never_predicted,
        n_degenerate=len(sm.degenerate_ids),
    )


def ap_compare(report_a: EvalReport, report_b: EvalReport) -> list[dict]:
    """Per-label AP deltas (a - b) joined with positive counts, sorted by
    ascending label frequency. Only labels with positives are listed."""
    if len(report_a.per_label_ap) != len(report_b.per_label_ap):
        raise ValidationError("reports cover different label spaces")
    rows = []
    for c, (ap_a, ap_b) in enumerate(zip(report_a.per_label_ap, report_b.per_label_ap)):
        if ap_a is None or ap_b is None:
            continue
        rows.append(
            {
                "label": c,
                "positives": report_a.label_positives[c],
                "ap_a": ap_a,
                "ap_b": ap_b,
                "delta": ap_a - ap_b,
            }
        )
    rows.sort(key=lambda r: (r["positives"], r["label"]))
    return rows


def save_report_json(path, report: EvalReport, extra: dict | None = None) -> None:
    payload = {"report": report.to_dict()}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def load_report_json(path) -> tuple[EvalReport, dict]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    report = EvalReport.from_dict(payload.pop("report"))
    return report, payload


def save_pr_curve_csv(path, curve: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["recall", "precision"])
        for rec, prec in curve:
            writer.writerow([repr(float(rec)), repr(float(prec))])
