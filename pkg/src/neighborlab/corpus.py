"""Image corpus model and ingestion.

A corpus couples a dense feature matrix (one row per image) with per-image
label sets and sparse metadata term sets of three kinds (tags, sets, groups).
This module owns the on-disk formats, validation, availability filtering,
seeded split generation, and training-set tag-vocabulary selection.

Formats
-------
* Feature file (binary, little-endian): magic ``NLFM``, u32 version=1,
  u64 N, u32 d, then N*d float32 values row-major.
* Metadata/labels: JSON lines, one object per image:
  ``{"id": int, "labels": [...], "tags": [...], "sets": [...], "groups": [...]}``
  with absent keys meaning empty.
* Label/vocabulary name files: one name per line, line number = id.
* Split files: JSON with train/val/test id arrays and the seed used.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .util import FormatError, ValidationError

FEATURE_MAGIC = b"NLFM"
FEATURE_VERSION = 1

_EMPTY_TERMS = np.empty(0, dtype=np.int64)


class MetadataKind(str, Enum):
    TAGS = "tags"
    SETS = "sets"
    GROUPS = "groups"


KINDS = (MetadataKind.TAGS, MetadataKind.SETS, MetadataKind.GROUPS)


@dataclass
class ImageRecord:
    """One image: id, dense feature vector, label set, per-kind term sets.

    Term arrays are sorted ascending and duplicate-free. Treat records as
    immutable after construction.
    """

    id: int
    features: np.ndarray
    labels: frozenset[int]
    metadata: dict[MetadataKind, np.ndarray]

    def terms(self, kind: MetadataKind) -> np.ndarray:
        return self.metadata.get(kind, _EMPTY_TERMS)

    def has_metadata(self) -> bool:
        return any(len(t) for t in self.metadata.values())


@dataclass
class Corpus:
    """Immutable-after-load collection of images plus name vocabularies."""

    images: list[ImageRecord]
    label_names: list[str]
    vocab: dict[MetadataKind, list[str]]
    d: int
    _by_id: dict[int, ImageRecord] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {rec.id: rec for rec in self.images}
        if len(self._by_id) != len(self.images):
            raise ValidationError("duplicate image ids in corpus")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    def ids(self) -> np.ndarray:
        return np.array([rec.id for rec in self.images], dtype=np.int64)

    def image(self, image_id: int) -> ImageRecord:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise ValidationError(f"unknown image id {image_id}") from None

    def __contains__(self, image_id: int) -> bool:
        return image_id in self._by_id

    def feature_matrix(self, ids: Iterable[int] | None = None) -> np.ndarray:
        """Stack feature rows for ``ids`` (corpus order when None)."""
        recs = self.images if ids is None else [self.image(i) for i in ids]
        if not recs:
            return np.empty((0, self.d), dtype=np.float32)
        return np.stack([rec.features for rec in recs])

    def label_sets(self, ids: Iterable[int]) -> list[frozenset[int]]:
        return [self.image(i).labels for i in ids]


@dataclass
class SplitSpec:
    """Disjoint train/val/test image-id lists plus the seed that shuffled them."""

    train: list[int]
    val: list[int]
    test: list[int]
    seed: int

    def check_disjoint(self) -> None:
        parts = [set(self.train), set(self.val), set(self.test)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ValidationError("split partitions overlap")


# ---------------------------------------------------------------------------
# feature file IO


def write_feature_file(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValidationError("feature matrix must be 2-D")
    n, d = matrix.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IQI", FEATURE_VERSION, n, d))
        f.write(matrix.tobytes(order="C"))


def read_feature_file(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(20)
        if len(header) < 20:
            raise FormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic = header[:4]
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
        version, n, d = struct.unpack("<IQI", header[4:])
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if d == 0:
            raise FormatError(f"{path}: zero feature dimension")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != n * d:
        got_rows = data.size // d
        raise FormatError(
            f"{path}: truncated data: header says {n} rows of {d} floats, "
            f"found {data.size} floats (~row {got_rows})"
        )
    return data.reshape(n, d).copy()


# ---------------------------------------------------------------------------
# corpus load / save


def _read_names(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def _write_names(path, names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name in names:
            f.write(f"{name}\n")


def _parse_id_list(raw, what: str, index: int) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.int64) if raw else _EMPTY_TERMS
    if arr.ndim != 1:
        raise FormatError(f"record {index}: {what} is not a flat list")
    if arr.size and arr.min() < 0:
        raise ValidationError(f"record {index}: negative {what} id {arr.min()}")
    return np.unique(arr)  # sorted ascending, duplicates dropped


def load_corpus(
    feature_path,
    metadata_path,
    labels_path,
    *,
    tags_vocab_path=None,
    sets_vocab_path=None,
    groups_vocab_path=None,
) -> Corpus:
    """Load and validate a corpus from its three core files.

    Row i of the feature matrix belongs to the i-th JSONL record. Vocabulary
    name files are optional; without them vocabulary sizes are inferred from
    the largest term id per kind and names are synthesized.
    """
    matrix = read_feature_file(feature_path)
    label_names = _read_names(labels_path)
    n_labels = len(label_names)

    raw_records = []
    with open(metadata_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            if not line.strip():
                continue
            try:
                raw_records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{metadata_path}: record {lineno}: bad JSON ({exc})")

    if len(raw_records) != matrix.shape[0]:
        raise FormatError(
            f"dimension mismatch: feature file has {matrix.shape[0]} rows, "
            f"metadata has {len(raw_records)} records"
        )

    vocab_paths = {
        MetadataKind.TAGS: tags_vocab_path,
        MetadataKind.SETS: sets_vocab_path,
        MetadataKind.GROUPS: groups_vocab_path,
    }
    vocab: dict[MetadataKind, list[str]] = {}
    for kind, path in vocab_paths.items():
        vocab[kind] = _read_names(path) if path is not None else []

    images: list[ImageRecord] = []
    seen_ids: set[int] = set()
    inferred_sizes = {kind: 0 for kind in KINDS}
    for index, raw in enumerate(raw_records):
        if "id" not in raw:
            raise FormatError(f"record {index}: missing id")
        image_id = int(raw["id"])
        if image_id < 0:
            raise ValidationError(f"record {index}: negative image id {image_id}")
        if image_id in seen_ids:
            raise ValidationError(f"record {index}: duplicate image id {image_id}")
        seen_ids.add(image_id)

        labels = _parse_id_list(raw.get("labels"), "label", index)
        if labels.size and labels.max() >= n_labels:
            raise ValidationError(
                f"record {index} (id {image_id}): label {labels.max()} out of "
                f"range [0, {n_labels})"
            )

        metadata: dict[MetadataKind, np.ndarray] = {}
        for kind in KINDS:
            terms = _parse_id_list(raw.get(kind.value), f"{kind.value} term", index)
            if terms.size:
                if vocab[kind] and terms.max() >= len(vocab[kind]):
                    raise ValidationError(
                        f"record {index} (id {image_id}): {kind.value} term "
                        f"{terms.max()} out of range [0, {len(vocab[kind])})"
                    )
                inferred_sizes[kind] = max(inferred_sizes[kind], int(terms.max()) + 1)
            metadata[kind] = terms

        images.append(
            ImageRecord(
                id=image_id,
                features=matrix[index],
                labels=frozenset(int(c) for c in labels),
                metadata=metadata,
            )
        )

    for kind in KINDS:
        if not vocab[kind]:
            vocab[kind] = [f"{kind.value}_{i:05d}" for i in range(inferred_sizes[kind])]

    return Corpus(images=images, label_names=label_names, vocab=vocab, d=matrix.shape[1])


def save_corpus(
    corpus: Corpus,
    feature_path,
    metadata_path,
    labels_path,
    *,
    tags_vocab_path=None,
    sets_vocab_path=None,
    groups_vocab_path=None,
) -> None:
    write_feature_file(feature_path, corpus.feature_matrix())
    with open(metadata_path, "w", encoding="utf-8") as f:
        for rec in corpus.images:
            obj = {"id": rec.id, "labels": sorted(rec.labels)}
            for kind in KINDS:
                obj[kind.value] = [int(t) for t in rec.terms(kind)]
            f.write(json.dumps(obj) + "\n")
    _write_names(labels_path, corpus.label_names)
    for kind, path in (
        (MetadataKind.TAGS, tags_vocab_path),
        (MetadataKind.SETS, sets_vocab_path),
        (MetadataKind.GROUPS, groups_vocab_path),
    ):
        if path is not None:
            _write_names(path, corpus.vocab[kind])


_DIR_FILES = {
    "features": "features.bin",
    "metadata": "metadata.jsonl",
    "labels": "labels.txt",
    MetadataKind.TAGS: "vocab_tags.txt",
    MetadataKind.SETS: "vocab_sets.txt",
    MetadataKind.GROUPS: "vocab_groups.txt",
}


def save_corpus_dir(corpus: Corpus, dirpath) -> Path:
    """Write a corpus under the standard directory layout."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    save_corpus(
        corpus,
        root / _DIR_FILES["features"],
        root / _DIR_FILES["metadata"],
        root / _DIR_FILES["labels"],
        tags_vocab_path=root / _DIR_FILES[MetadataKind.TAGS],
        sets_vocab_path=root / _DIR_FILES[MetadataKind.SETS],
        groups_vocab_path=root / _DIR_FILES[MetadataKind.GROUPS],
    )
    return root


def load_corpus_dir(dirpath) -> Corpus:
    root = Path(dirpath)

    def opt(name):
        path = root / name
        return path if path.exists() else None

    return load_corpus(
        root / _DIR_FILES["features"],
        root / _DIR_FILES["metadata"],
        root / _DIR_FILES["labels"],
        tags_vocab_path=opt(_DIR_FILES[MetadataKind.TAGS]),
        sets_vocab_path=opt(_DIR_FILES[MetadataKind.SETS]),
        groups_vocab_path=opt(_DIR_FILES[MetadataKind.GROUPS]),
    )


# ---------------------------------------------------------------------------
# statistics, filtering, splits, vocabulary selection


def _mean_median(values) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"mean": 0.0, "median": 0.0}
    return {"mean": float(arr.mean()), "median": float(np.median(arr))}


def corpus_stats(corpus: Corpus) -> dict:
    """Validation-report statistics: count distributions per label/term kind.

    ``images_per_label`` / ``images_per_term`` aggregate only over labels and
    terms that occur at least once.
    """
    label_counts = np.zeros(corpus.n_labels, dtype=np.int64)
    for rec in corpus.images:
        for c in rec.labels:
            label_counts[c] += 1
    stats = {
        "n_images": len(corpus),
        "d": corpus.d,
        "n_labels": corpus.n_labels,
        "labels_per_image": _mean_median([len(rec.labels) for rec in corpus.images]),
        "images_per_label": _mean_median(label_counts[label_counts > 0]),
        "kinds": {},
    }
    for kind in KINDS:
        vocab_size = len(corpus.vocab[kind])
        term_counts = np.zeros(max(vocab_size, 1), dtype=np.int64)
        per_image = []
        for rec in corpus.images:
            terms = rec.terms(kind)
            per_image.append(len(terms))
            term_counts[terms] += 1
        stats["kinds"][kind.value] = {
            "vocab_size": vocab_size,
            "terms_per_image": _mean_median(per_image),
            "images_per_term": _mean_median(term_counts[term_counts > 0]),
        }
    return stats


def filter_images(corpus: Corpus) -> Corpus:
    """Keep images that carry at least one label and at least one metadata
    term of any kind; original order preserved."""
    kept = [rec for rec in corpus.images if rec.labels and rec.has_metadata()]
    return Corpus(images=kept, label_names=corpus.label_names, vocab=corpus.vocab, d=corpus.d)


def partition_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Train/val/test sizes for an n-image corpus.

    ``fractions`` holds two or three entries; with two (or a trailing None)
    the test partition takes the remainder. Cumulative rounding keeps the
    sizes exact and never overflows n.
    """
    fr = list(fractions)
    if len(fr) == 3 and fr[2] is None:
        fr = fr[:2]
    if len(fr) not in (2, 3):
        raise ValidationError("fractions must hold 2 or 3 entries")
    if any(f < 0 for f in fr):
        raise ValidationError("fractions must be non-negative")
    if sum(fr) > 1.0 + 1e-9:
        raise ValidationError(f"fractions sum to {sum(fr):.6f} > 1")
    bounds = [int(math.floor(c * n + 0.5)) for c in np.cumsum(fr)]
    n_train = bounds[0]
    n_val = bounds[1] - bounds[0]
    n_test = (n - bounds[1]) if len(fr) == 2 else bounds[2] - bounds[1]
    return n_train, n_val, n_test


def make_splits(
    corpus: Corpus,
    fractions: Sequence[float],
    n_splits: int,
    seed: int,
    *,
    sizes: Sequence[int] | None = None,
) -> list[SplitSpec]:
    """Generate ``n_splits`` independent seeded shuffles partitioned into
    train/val/test.

    Split i shuffles with seed+i (Fisher-Yates via ``random.shuffle``).
    ``sizes`` overrides fractions with absolute counts.
    """
    if n_splits < 1:
        raise ValidationError("n_splits must be >= 1")
    n = len(corpus)
    if sizes is not None:
        if len(sizes) != 3 or any(s < 0 for s in sizes):
            raise ValidationError("sizes must be three non-negative counts")
        if sum(sizes) > n:
            raise ValidationError(f"corpus has {n} images, requested sizes sum to {sum(sizes)}")
        n_train, n_val, n_test = (int(s) for s in sizes)
    else:
        n_train, n_val, n_test = partition_sizes(n, fractions)

    base_ids = [rec.id for rec in corpus.images]
    splits = []
    for i in range(n_splits):
        ids = list(base_ids)
        random.Random(seed + i).shuffle(ids)
        train = ids[:n_train]
        val = ids[n_train : n_train + n_val]
        test = ids[n_train + n_val : n_train + n_val + n_test]
        splits.append(SplitSpec(train=train, val=val, test=test, seed=seed + i))
    return splits


def save_split(path, split: SplitSpec) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            {"train": split.train, "val": split.val, "test": split.test, "seed": split.seed},
            f,
        )


def load_split(path) -> SplitSpec:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    try:
        return SplitSpec(
            train=[int(i) for i in obj["train"]],
            val=[int(i) for i in obj["val"]],
            test=[int(i) for i in obj["test"]],
            seed=int(obj["seed"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing split key {exc}")


def select_tag_vocabulary(
    corpus: Corpus, train_ids: Iterable[int], kind: MetadataKind, tau: int
) -> set[int]:
    """Pick the ``tau`` terms with highest training-set document frequency.

    Applies to tags only; sets and groups always use their entire vocabulary.
    Frequency ties break by ascending term id.
    """
    if tau < 1:
        raise ValidationError("tau must be >= 1")
    if kind is not MetadataKind.TAGS:
        return set(range(len(corpus.vocab[kind])))
    vocab_size = len(corpus.vocab[kind])
    df = np.zeros(vocab_size, dtype=np.int64)
    for image_id in train_ids:
        df[corpus.image(image_id).terms(kind)] += 1
    order = np.lexsort((np.arange(vocab_size), -df))
    return {int(t) for t in order[: min(tau, vocab_size)]}


def restrict_metadata(corpus: Corpus, kind: MetadataKind, vocab: Iterable[int]) -> Corpus:
    """Intersect every image's term set of ``kind`` with ``vocab``."""
    keep = np.array(sorted(set(int(t) for t in vocab)), dtype=np.int64)
    if keep.size and keep.max() >= len(corpus.vocab[kind]) and len(corpus.vocab[kind]):
        raise ValidationError(
            f"vocab id {keep.max()} out of range for kind {kind.value} "
            f"({len(corpus.vocab[kind])} names)"
        )
    images = []
    for rec in corpus.images:
        terms = rec.terms(kind)
        restricted = terms[np.isin(terms, keep)] if terms.size else terms
        metadata = dict(rec.metadata)
        metadata[kind] = restricted
        images.append(
            ImageRecord(id=rec.id, features=rec.features, labels=rec.labels, metadata=metadata)
        )
    return Corpus(images=images, label_names=corpus.label_names, vocab=corpus.vocab, d=corpus.d)
