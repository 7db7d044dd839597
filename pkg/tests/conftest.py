import numpy as np
import pytest

from neighborlab.corpus import Corpus, ImageRecord, MetadataKind


def build_corpus(records, n_labels, d, vocab_sizes=None):
    """Assemble a Corpus from (id, features, labels, tags, sets, groups) tuples."""
    vocab_sizes = vocab_sizes or {}
    images = []
    for rec in records:
        image_id, feats, labels, tags, sets_, groups = rec
        images.append(
            ImageRecord(
                id=image_id,
                features=np.asarray(feats, dtype=np.float32),
                labels=frozenset(labels),
                metadata={
                    MetadataKind.TAGS: np.array(sorted(set(tags)), dtype=np.int64),
                    MetadataKind.SETS: np.array(sorted(set(sets_)), dtype=np.int64),
                    MetadataKind.GROUPS: np.array(sorted(set(groups)), dtype=np.int64),
                },
            )
        )
    def size(kind, default):
        if kind in vocab_sizes:
            return vocab_sizes[kind]
        terms = [t for img in images for t in img.metadata[kind].tolist()]
        return (max(terms) + 1) if terms else default
    vocab = {
        kind: [f"{kind.value}_{i}" for i in range(size(kind, 0))] for kind in MetadataKind
    }
    return Corpus(
        images=images,
        label_names=[f"label_{c}" for c in range(n_labels)],
        vocab=vocab,
        d=d,
    )


def random_corpus(rng, n, d=4, n_labels=5, vocab=30, max_terms=8):
    """Random corpus where every image has at least one label and one tag."""
    records = []
    for i in range(n):
        n_tags = int(rng.integers(1, max_terms + 1))
        tags = rng.choice(vocab, size=n_tags, replace=False).tolist()
        labels = rng.choice(n_labels, size=int(rng.integers(1, 3)), replace=False).tolist()
        sets_ = rng.choice(vocab, size=int(rng.integers(0, 3)), replace=False).tolist()
        groups = rng.choice(vocab, size=int(rng.integers(0, 4)), replace=False).tolist()
        records.append((i, rng.normal(size=d), labels, tags, sets_, groups))
    return build_corpus(records, n_labels, d, vocab_sizes={k: vocab for k in MetadataKind})


@pytest.fixture
def tiny_corpus():
    """Three images, d=4, L=2; the smallest end-to-end fixture."""
    return build_corpus(
        records=[
            (0, [0.5, 1.0, 0.0, -1.0], {0}, [1, 2], [0], []),
            (1, [1.5, 0.0, 2.0, 0.25], {0, 1}, [2, 3], [], [5]),
            (2, [-0.5, 0.25, 1.0, 0.0], {1}, [4], [1], [5]),
        ],
        n_labels=2,
        d=4,
    )
