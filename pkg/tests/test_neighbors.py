import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neighborlab.corpus import MetadataKind
from neighborlab.neighbors import (
    NeighborList,
    build_index,
    build_neighbor_lists,
    build_visual_neighbor_lists,
    candidate_count,
    enumerate_neighborhoods,
    jaccard_distance,
    load_neighbor_lists,
    neighbor_label_correlation,
    query_knn,
    sample_neighborhoods,
    save_neighbor_lists,
)
from neighborlab.util import ValidationError

from conftest import build_corpus, random_corpus


# ---------------------------------------------------------------------------
# oracle: exhaustive pairwise scan, kept independent of the index code


def brute_force_knn(pool_sets, query_terms, query_id, max_rank):
    """pool_sets: list of (image_id, python set). Returns (ids, dists)."""
    query = set(query_terms)
    scored = []
    for image_id, terms in pool_sets:
        if image_id == query_id:
            continue
        inter = len(query & terms)
        union = len(query) + len(terms) - inter
        dist = 1.0 if union == 0 else 1.0 - inter / union
        scored.append((dist, image_id))
    scored.sort()
    top = scored[:max_rank]
    return [i for _, i in top], [d for d, _ in top]


# ---------------------------------------------------------------------------
# jaccard distance


def test_jaccard_examples():
    assert jaccard_distance({1, 2}, {2, 3}) == pytest.approx(1 - 1 / 3)
    assert jaccard_distance({4, 7, 9}, {4, 7, 9}) == 0.0
    assert jaccard_distance({1, 2}, {3, 4}) == 1.0
    assert jaccard_distance(set(), set()) == 1.0
    assert jaccard_distance([], [5]) == 1.0


@settings(max_examples=50, deadline=None)
@given(
    a=st.frozensets(st.integers(min_value=0, max_value=30), max_size=12),
    b=st.frozensets(st.integers(min_value=0, max_value=30), max_size=12),
)
def test_jaccard_symmetry_and_range(a, b):
    d_ab = jaccard_distance(a, b)
    assert d_ab == jaccard_distance(b, a)
    assert 0.0 <= d_ab <= 1.0
    if a and a == b:
        assert d_ab == 0.0


# ---------------------------------------------------------------------------
# index construction


def test_build_index_postings():
    corpus = build_corpus(
        [
            (0, np.zeros(2), {0}, [1], [], []),
            (1, np.zeros(2), {0}, [1, 2], [], []),
            (2, np.zeros(2), {0}, [3], [], []),
        ],
        n_labels=1,
        d=2,
        vocab_sizes={k: 5 for k in MetadataKind},
    )
    index = build_index(corpus, [0, 1, 2], MetadataKind.TAGS)
    assert {t: p.tolist() for t, p in index.postings.items()} == {1: [0, 1], 2: [1], 3: [2]}
    assert index.set_sizes.tolist() == [1, 2, 1]
    index.check()


def test_empty_pool_index_errors_on_query():
    corpus = build_corpus(
        [(0, np.zeros(2), {0}, [1], [], [])], n_labels=1, d=2,
        vocab_sizes={k: 3 for k in MetadataKind},
    )
    index = build_index(corpus, [], MetadataKind.TAGS)
    assert len(index) == 0
    with pytest.raises(ValidationError, match="pool holds 0"):
        query_knn(index, {1}, query_id=99, max_rank=1)


# ---------------------------------------------------------------------------
# querying


@pytest.fixture
def small_pool_corpus():
    return build_corpus(
        [
            (0, np.zeros(2), {0}, [1, 2], [], []),
            (1, np.zeros(2), {0}, [2], [], []),
            (2, np.zeros(2), {0}, [5], [], []),
        ],
        n_labels=1,
        d=2,
        vocab_sizes={k: 6 for k in MetadataKind},
    )


def test_query_direct_example(small_pool_corpus):
    index = build_index(small_pool_corpus, [0, 1, 2], MetadataKind.TAGS)
    result = query_knn(index, {1, 2}, query_id=99, max_rank=2)
    assert result.ids.tolist() == [0, 1]
    assert result.dists.tolist() == [0.0, 0.5]
    result.check()


def test_query_excludes_self(small_pool_corpus):
    index = build_index(small_pool_corpus, [0, 1, 2], MetadataKind.TAGS)
    result = query_knn(index, {1, 2}, query_id=0, max_rank=2)
    assert 0 not in result.ids.tolist()
    assert result.ids.tolist() == [1, 2]
    assert result.dists.tolist() == [0.5, 1.0]


def test_query_empty_terms_pads_by_ascending_id(small_pool_corpus):
    index = build_index(small_pool_corpus, [0, 1, 2], MetadataKind.TAGS)
    result = query_knn(index, set(), query_id=99, max_rank=2)
    assert result.ids.tolist() == [0, 1]
    assert np.all(result.dists == 1.0)


def test_query_pool_too_small(small_pool_corpus):
    index = build_index(small_pool_corpus, [0, 1], MetadataKind.TAGS)
    with pytest.raises(ValidationError, match="need 3"):
        query_knn(index, {1}, query_id=0, max_rank=3)


def _pool_sets(corpus, ids, kind, vocab=None):
    out = []
    for image_id in ids:
        terms = set(corpus.image(image_id).terms(kind).tolist())
        if vocab is not None:
            terms &= vocab
        out.append((image_id, terms))
    return out


def test_query_equals_brute_force_on_random_corpora():
    rng = np.random.default_rng(21)
    for trial in range(5):
        n = int(rng.integers(50, 200))
        corpus = random_corpus(rng, n, vocab=40)
        ids = [r.id for r in corpus.images]
        index = build_index(corpus, ids, MetadataKind.TAGS)
        pool_sets = _pool_sets(corpus, ids, MetadataKind.TAGS)
        max_rank = int(rng.integers(1, 12))
        for image_id in rng.choice(ids, size=20, replace=False).tolist():
            terms = corpus.image(image_id).terms(MetadataKind.TAGS)
            got = query_knn(index, terms, image_id, max_rank)
            want_ids, want_dists = brute_force_knn(pool_sets, set(terms.tolist()),
                                                   image_id, max_rank)
            assert got.ids.tolist() == want_ids
            assert got.dists.tolist() == want_dists  # bit-exact


def test_query_equals_brute_force_with_vocab_restriction():
    rng = np.random.default_rng(22)
    corpus = random_corpus(rng, 120, vocab=40)
    ids = [r.id for r in corpus.images]
    vocab = set(rng.choice(40, size=18, replace=False).tolist())
    index = build_index(corpus, ids, MetadataKind.TAGS, vocab)
    pool_sets = _pool_sets(corpus, ids, MetadataKind.TAGS, vocab)
    for image_id in ids[:30]:
        terms = set(corpus.image(image_id).terms(MetadataKind.TAGS).tolist()) & vocab
        got = query_knn(index, corpus.image(image_id).terms(MetadataKind.TAGS), image_id, 5)
        want_ids, want_dists = brute_force_knn(pool_sets, terms, image_id, 5)
        assert got.ids.tolist() == want_ids
        assert got.dists.tolist() == want_dists


def test_build_neighbor_lists_covers_pool(small_pool_corpus):
    lists = build_neighbor_lists(small_pool_corpus, [0, 1, 2], MetadataKind.TAGS, 2)
    assert set(lists) == {0, 1, 2}
    for nl in lists.values():
        assert len(nl) == 2
        nl.check()


# ---------------------------------------------------------------------------
# visual (L2) backend


def test_visual_lists_match_naive_oracle():
    rng = np.random.default_rng(23)
    corpus = random_corpus(rng, 40, d=6)
    ids = [r.id for r in corpus.images]
    lists = build_visual_neighbor_lists(corpus, ids, max_rank=5)
    feats = {r.id: r.features.astype(np.float64) for r in corpus.images}
    for image_id in ids:
        scored = sorted(
            (float(np.sqrt(np.sum((feats[image_id] - feats[j]) ** 2))), j)
            for j in ids if j != image_id
        )
        want = [j for _, j in scored[:5]]
        got = lists[image_id]
        assert got.ids.tolist() == want
        assert np.all((got.dists >= 0) & (got.dists < 1))  # squashed to [0, 1)
        got.check()


# ---------------------------------------------------------------------------
# candidate neighborhoods


def _mk_list(ids):
    ids = np.array(ids, dtype=np.int64)
    return NeighborList(query_id=-1, ids=ids, dists=np.linspace(0, 0.9, len(ids)))


def test_candidate_counts():
    assert candidate_count(6, 3) == 20
    assert candidate_count(4, 4) == 1
    assert candidate_count(4, 1) == 4
    with pytest.raises(ValidationError):
        candidate_count(2, 3)


def test_enumeration_is_lexicographic_over_ranks():
    nl = _mk_list([10, 11, 12, 13])
    subsets = enumerate_neighborhoods(nl, 2)
    assert subsets == [(10, 11), (10, 12), (10, 13), (11, 12), (11, 13), (12, 13)]
    assert enumerate_neighborhoods(nl, 4) == [(10, 11, 12, 13)]
    assert enumerate_neighborhoods(nl, 1) == [(10,), (11,), (12,), (13,)]


def test_sampling_distinct_and_deterministic():
    nl = _mk_list(list(range(100, 106)))
    drawn = sample_neighborhoods(nl, 3, 10, seed=5)
    assert len(drawn) == 10
    assert len(set(drawn)) == 10
    assert drawn == sample_neighborhoods(nl, 3, 10, seed=5)
    assert drawn != sample_neighborhoods(nl, 3, 10, seed=6)
    full = enumerate_neighborhoods(nl, 3)
    assert set(drawn) <= set(full)


def test_sampling_clamps_to_full_enumeration():
    nl = _mk_list(list(range(100, 106)))
    assert sample_neighborhoods(nl, 3, 25, seed=1) == enumerate_neighborhoods(nl, 3)
    (single,) = sample_neighborhoods(nl, 3, 1, seed=3)
    assert single == sample_neighborhoods(nl, 3, 1, seed=3)[0]


# ---------------------------------------------------------------------------
# neighbor-label correlation


def test_correlation_perfect_sharing():
    records = [(i, np.zeros(2), {0}, [1], [], []) for i in range(6)]
    corpus = build_corpus(records, n_labels=1, d=2, vocab_sizes={k: 3 for k in MetadataKind})
    lists = {
        i: NeighborList(query_id=i,
                        ids=np.array([(i + 1) % 6, (i + 2) % 6]),
                        dists=np.array([0.0, 0.0]))
        for i in range(6)
    }
    result = neighbor_label_correlation(corpus, lists, k_max=2)
    assert np.allclose(result.curves[0], 1.0)
    assert result.base_rates[0] == 1.0


def test_correlation_random_lists_match_base_rate():
    rng = np.random.default_rng(31)
    n, n_labels = 500, 3
    records = [
        (i, np.zeros(2), {int(rng.integers(n_labels))}, [1], [], []) for i in range(n)
    ]
    corpus = build_corpus(records, n_labels=n_labels, d=2,
                          vocab_sizes={k: 3 for k in MetadataKind})
    lists = {}
    for i in range(n):
        others = rng.choice([j for j in range(n) if j != i], size=4, replace=False)
        lists[i] = NeighborList(query_id=i, ids=others.astype(np.int64),
                                dists=np.zeros(4))
    result = neighbor_label_correlation(corpus, lists, k_max=4)
    for c in range(n_labels):
        assert result.curves[c].mean() == pytest.approx(result.base_rates[c], abs=0.08)


def test_correlation_k_average_equals_pair_ratio():
    rng = np.random.default_rng(32)
    corpus = random_corpus(rng, 80)
    ids = [r.id for r in corpus.images]
    lists = build_neighbor_lists(corpus, ids, MetadataKind.TAGS, 5)
    result = neighbor_label_correlation(corpus, lists, k_max=5)
    for c, curve in result.curves.items():
        shared = total = 0
        for image_id in ids:
            if c not in corpus.image(image_id).labels:
                continue
            for j in lists[image_id].ids.tolist():
                total += 1
                if c in corpus.image(j).labels:
                    shared += 1
        assert np.mean(curve) == pytest.approx(shared / total)
    # values live in [0, 1]
    for curve in result.curves.values():
        assert np.all((curve >= 0) & (curve <= 1))


def test_correlation_skips_labels_without_positives():
    records = [(i, np.zeros(2), {0}, [1], [], []) for i in range(3)]
    corpus = build_corpus(records, n_labels=2, d=2, vocab_sizes={k: 3 for k in MetadataKind})
    lists = {0: NeighborList(query_id=0, ids=np.array([1]), dists=np.array([0.0]))}
    result = neighbor_label_correlation(corpus, lists, k_max=1)
    assert 1 not in result.curves


# ---------------------------------------------------------------------------
# dump / load


def test_neighbor_list_file_round_trip(tmp_path):
    rng = np.random.default_rng(33)
    corpus = random_corpus(rng, 30)
    ids = [r.id for r in corpus.images]
    lists = build_neighbor_lists(corpus, ids, MetadataKind.TAGS, 4)
    path = tmp_path / "nbrs.jsonl"
    save_neighbor_lists(path, lists)
    loaded = load_neighbor_lists(path)
    assert set(loaded) == set(lists)
    for image_id in ids:
        assert loaded[image_id].ids.tolist() == lists[image_id].ids.tolist()
        # float round trip must be exact for cache reuse to be bit-identical
        assert loaded[image_id].dists.tolist() == lists[image_id].dists.tolist()
