"""Exact Jaccard top-M neighbor search over sparse metadata term sets.

An inverted index (term -> posting list of pool positions) accumulates
intersection counts per query, which yields exactly the same distances as a
brute-force scan of ``1 - |a & b| / |a | b|`` over the pool. Queries never
return the query image itself; pool images sharing no term have distance 1
and pad the result in ascending-id order. Also provides candidate
neighborhood enumeration/sampling and the neighbor-label correlation curve.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import Corpus, MetadataKind
from .util import ValidationError

__all__ = [
    "NeighborList",
    "NeighborhoodSpec",
    "MetadataIndex",
    "jaccard_distance",
    "build_index",
    "query_knn",
    "build_neighbor_lists",
    "build_visual_neighbor_lists",
    "candidate_count",
    "enumerate_neighborhoods",
    "sample_neighborhoods",
    "neighbor_label_correlation",
    "save_neighbor_lists",
    "load_neighbor_lists",
]


@dataclass
class NeighborList:
    """Ranked neighbors of one query image: (id, distance) pairs, distance
    nondecreasing, ties broken by ascending id, query id never included."""

    query_id: int
    ids: np.ndarray
    dists: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.dists)]

    def check(self) -> None:
        if self.query_id in set(int(i) for i in self.ids):
            raise ValidationError(f"query id {self.query_id} appears in its own neighbors")
        if np.any(np.diff(self.dists) < 0):
            raise ValidationError("neighbor distances decrease")
        if np.any((self.dists < 0) | (self.dists > 1)):
            raise ValidationError("neighbor distance outside [0, 1]")


@dataclass
class NeighborhoodSpec:
    """Neighborhood sampling parameters: subsets of size m of the top-M.

    Training draws ``samples_train`` neighborhoods per forward pass and
    evaluation averages over ``samples_test`` draws. ``allow_degenerate``
    lets images with a missing or too-short neighbor list fall back to a
    zero neighbor hidden state instead of erroring.
    """

    m: int = 3
    max_rank: int = 6
    samples_train: int = 1
    samples_test: int = 10
    seed: int = 0
    allow_degenerate: bool = False

    def __post_init__(self):
        if not (0 < self.m <= self.max_rank):
            raise ValidationError(f"need 0 < m <= max_rank, got m={self.m} M={self.max_rank}")
        if self.samples_train < 1 or self.samples_test < 1:
            raise ValidationError("sample counts must be >= 1")


def jaccard_distance(a: Iterable[int], b: Iterable[int]) -> float:
    """``1 - |a & b| / |a | b|``; two empty sets are maximally distant (1)."""
    sa = a if isinstance(a, (set, frozenset)) else set(int(t) for t in a)
    sb = b if isinstance(b, (set, frozenset)) else set(int(t) for t in b)
    inter = len(sa & sb)
    union = len(sa) + len(sb) - inter
    if union == 0:
        return 1.0
    return 1.0 - inter / union


@dataclass
class MetadataIndex:
    """Inverted index over one metadata kind for a fixed pool of images."""

    kind: MetadataKind
    pool_ids: np.ndarray  # image ids, pool position -> id
    postings: dict[int, np.ndarray]  # term id -> ascending pool positions
    set_sizes: np.ndarray  # |terms(image) & vocab| per pool position
    vocab: frozenset[int] | None  # None = entire vocabulary
    id_to_pos: dict[int, int] = field(init=False, repr=False)
    _ids_ascending: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.id_to_pos = {int(i): p for p, i in enumerate(self.pool_ids)}
        if len(self.id_to_pos) != len(self.pool_ids):
            raise ValidationError("duplicate image ids in index pool")
        self._ids_ascending = np.argsort(self.pool_ids, kind="stable")

    def __len__(self) -> int:
        return len(self.pool_ids)

    def check(self) -> None:
        for term, plist in self.postings.items():
            if np.any(np.diff(plist) <= 0):
                raise ValidationError(f"posting list for term {term} not strictly ascending")
        total = sum(len(p) for p in self.postings.values())
        if total != int(self.set_sizes.sum()):
            raise ValidationError("posting lengths disagree with set sizes")


def _restrict(terms: np.ndarray, vocab: frozenset[int] | None) -> np.ndarray:
    if vocab is None or terms.size == 0:
        return terms
    return np.array([t for t in terms.tolist() if t in vocab], dtype=np.int64)


def build_index(
    corpus: Corpus,
    pool_ids: Iterable[int],
    kind: MetadataKind,
    vocab: Iterable[int] | None = None,
) -> MetadataIndex:
    """Index ``pool_ids`` for exact Jaccard queries over ``kind`` term sets,
    optionally restricted to a term vocabulary."""
    pool = np.array([int(i) for i in pool_ids], dtype=np.int64)
    vocab_set = None if vocab is None else frozenset(int(t) for t in vocab)
    lists: dict[int, list[int]] = {}
    sizes = np.zeros(len(pool), dtype=np.int64)
    for pos, image_id in enumerate(pool.tolist()):
        terms = _restrict(corpus.image(image_id).terms(kind), vocab_set)
        sizes[pos] = len(terms)
        for t in terms.tolist():
            lists.setdefault(t, []).append(pos)
    postings = {t: np.array(p, dtype=np.int64) for t, p in lists.items()}
    return MetadataIndex(kind=kind, pool_ids=pool, postings=postings, set_sizes=sizes, vocab=vocab_set)


def query_knn(
    index: MetadataIndex,
    query_terms: Iterable[int],
    query_id: int,
    max_rank: int,
) -> NeighborList:
    """Top-``max_rank`` pool images by Jaccard distance to ``query_terms``.

    The query image itself is excluded outright. Ties (including the
    distance-1 padding of images sharing no term) break by ascending id.
    """
    if max_rank < 1:
        raise ValidationError("max_rank must be >= 1")
    pool_size = len(index.pool_ids)
    self_pos = index.id_to_pos.get(int(query_id), -1)
    available = pool_size - (1 if self_pos >= 0 else 0)
    if available < max_rank:
        raise ValidationError(
            f"pool holds {available} candidates (excluding query), need {max_rank}"
        )

    terms = np.asarray(list(query_terms), dtype=np.int64)
    terms = _restrict(np.unique(terms), index.vocab)
    q_size = len(terms)

    counts = np.zeros(pool_size, dtype=np.int64)
    for t in terms.tolist():
        plist = index.postings.get(t)
        if plist is not None:
            counts[plist] += 1
    if self_pos >= 0:
        counts[self_pos] = 0

    matched = np.nonzero(counts)[0]
    inter = counts[matched]
    union = q_size + index.set_sizes[matched] - inter
    dist = 1.0 - inter / union
    order = np.lexsort((index.pool_ids[matched], dist))
    take = order[:max_rank]
    out_ids = index.pool_ids[matched[take]]
    out_dists = dist[take]

    missing = max_rank - len(take)
    if missing > 0:
        matched_mask = np.zeros(pool_size, dtype=bool)
        matched_mask[matched] = True
        pad = []
        for pos in index._ids_ascending.tolist():
            if pos == self_pos or matched_mask[pos]:
                continue
            pad.append(index.pool_ids[pos])
            if len(pad) == missing:
                break
        out_ids = np.concatenate([out_ids, np.array(pad, dtype=np.int64)])
        out_dists = np.concatenate([out_dists, np.ones(missing)])

    return NeighborList(query_id=int(query_id), ids=out_ids, dists=out_dists)


def build_neighbor_lists(
    corpus: Corpus,
    pool_ids: Sequence[int],
    kind: MetadataKind,
    max_rank: int,
    vocab: Iterable[int] | None = None,
) -> dict[int, NeighborList]:
    """Within-pool top-``max_rank`` Jaccard neighbor lists for every pool image."""
    index = build_index(corpus, pool_ids, kind, vocab)
    out = {}
    for image_id in pool_ids:
        terms = corpus.image(image_id).terms(kind)
        out[int(image_id)] = query_knn(index, terms, image_id, max_rank)
    return out


def build_visual_neighbor_lists(
    corpus: Corpus,
    pool_ids: Sequence[int],
    max_rank: int,
    chunk: int = 512,
) -> dict[int, NeighborList]:
    """Within-pool top-``max_rank`` neighbors by Euclidean feature distance.

    Distances are squashed to d/(1+d) so they satisfy the [0, 1] neighbor
    contract; the monotone map preserves ranking. Ties break by ascending id.
    """
    pool = np.array([int(i) for i in pool_ids], dtype=np.int64)
    if len(pool) - 1 < max_rank:
        raise ValidationError(f"pool holds {len(pool) - 1} candidates, need {max_rank}")
    feats = corpus.feature_matrix(pool.tolist()).astype(np.float64)
    sq = np.einsum("ij,ij->i", feats, feats)
    out: dict[int, NeighborList] = {}
    for start in range(0, len(pool), chunk):
        stop = min(start + chunk, len(pool))
        block = feats[start:stop]
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * block @ feats.T
        np.maximum(d2, 0.0, out=d2)
        for row, qpos in enumerate(range(start, stop)):
            d = np.sqrt(d2[row])
            d = d / (1.0 + d)
            d[qpos] = np.inf  # self excluded
            order = np.lexsort((pool, d))[:max_rank]
            out[int(pool[qpos])] = NeighborList(
                query_id=int(pool[qpos]), ids=pool[order], dists=d[order]
            )
    return out


# ---------------------------------------------------------------------------
# candidate neighborhoods


def candidate_count(n_neighbors: int, m: int) -> int:
    """Number of size-m candidate neighborhoods drawn from ``n_neighbors``."""
    if m < 1:
        raise ValidationError("m must be >= 1")
    if m > n_neighbors:
        raise ValidationError(f"need at least {m} neighbors, have {n_neighbors}")
    return math.comb(n_neighbors, m)


def enumerate_neighborhoods(neighbor_list: NeighborList, m: int) -> list[tuple[int, ...]]:
    """All size-m neighbor-id subsets, lexicographic over neighbor ranks."""
    from itertools import combinations

    candidate_count(len(neighbor_list), m)  # validates
    ids = neighbor_list.ids.tolist()
    return [tuple(ids[r] for r in ranks) for ranks in combinations(range(len(ids)), m)]


def sample_neighborhoods(
    neighbor_list: NeighborList, m: int, count: int, seed: int
) -> list[tuple[int, ...]]:
    """Draw ``count`` distinct size-m neighborhoods uniformly (no replacement).

    Returns the full lexicographic enumeration when ``count`` covers it.
    Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValidationError("count must be >= 1")
    total = candidate_count(len(neighbor_list), m)
    if count >= total:
        return enumerate_neighborhoods(neighbor_list, m)
    rng = random.Random(seed)
    n = len(neighbor_list)
    ids = neighbor_list.ids.tolist()
    seen: set[tuple[int, ...]] = set()
    out: list[tuple[int, ...]] = []
    while len(out) < count:
        ranks = tuple(sorted(rng.sample(range(n), m)))
        if ranks in seen:
            continue
        seen.add(ranks)
        out.append(tuple(ids[r] for r in ranks))
    return out


# ---------------------------------------------------------------------------
# neighbor-label correlation


@dataclass
class CorrelationResult:
    """P(k-th neighbor carries label | image carries label) per label and k,
    with the overall per-label base rates over the covered images."""

    k_max: int
    curves: dict[int, np.ndarray]  # label -> (k_max,) probabilities, NaN if undefined
    base_rates: dict[int, float]
    positives: dict[int, int]

    def mean_curve(self, labels: Iterable[int] | None = None) -> np.ndarray:
        keys = list(self.curves) if labels is None else [c for c in labels if c in self.curves]
        if not keys:
            return np.full(self.k_max, np.nan)
        return np.nanmean(np.stack([self.curves[c] for c in keys]), axis=0)


def neighbor_label_correlation(
    corpus: Corpus,
    neighbor_lists: Mapping[int, NeighborList],
    k_max: int,
) -> CorrelationResult:
    """Fraction of label-sharing k-th neighbors, conditioned on the query
    image carrying the label. Labels with no positive image are omitted."""
    if k_max < 1:
        raise ValidationError("k_max must be >= 1")
    n_labels = corpus.n_labels
    num = np.zeros((n_labels, k_max), dtype=np.int64)
    den = np.zeros((n_labels, k_max), dtype=np.int64)
    pos = np.zeros(n_labels, dtype=np.int64)
    n_queries = 0
    for query_id, nl in neighbor_lists.items():
        q_labels = corpus.image(query_id).labels
        n_queries += 1
        for c in q_labels:
            pos[c] += 1
        depth = min(len(nl), k_max)
        for k in range(depth):
            nbr_labels = corpus.image(int(nl.ids[k])).labels
            for c in q_labels:
                den[c, k] += 1
                if c in nbr_labels:
                    num[c, k] += 1
    curves = {}
    base_rates = {}
    positives = {}
    for c in range(n_labels):
        if pos[c] == 0:
            continue
        with np.errstate(invalid="ignore"):
            curves[c] = np.where(den[c] > 0, num[c] / np.maximum(den[c], 1), np.nan)
        base_rates[c] = float(pos[c] / n_queries) if n_queries else float("nan")
        positives[c] = int(pos[c])
    return CorrelationResult(k_max=k_max, curves=curves, base_rates=base_rates, positives=positives)


# ---------------------------------------------------------------------------
# neighbor-list cache files (JSON lines: {"id": ..., "nbrs": [[id, dist], ...]})


def save_neighbor_lists(path, lists: Mapping[int, NeighborList]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for query_id in sorted(lists):
            nl = lists[query_id]
            f.write(json.dumps({"id": int(query_id), "nbrs": nl.pairs()}) + "\n")


def load_neighbor_lists(path) -> dict[int, NeighborList]:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            ids = np.array([p[0] for p in obj["nbrs"]], dtype=np.int64)
            dists = np.array([p[1] for p in obj["nbrs"]], dtype=np.float64)
            out[int(obj["id"])] = NeighborList(query_id=int(obj["id"]), ids=ids, dists=dists)
    return out
