"""Seeded synthetic corpus generator with latent topics.

Each image draws a topic; its labels are the topic's label block plus
optional noise labels, its metadata terms come from a topic-specific
heavy-tailed distribution mixed with global noise, and its features sit at
the topic centroid plus Gaussian noise. A configurable fraction of images is
"ambiguous": their features are a convex blend of two topic centroids while
labels and metadata follow the first topic, so metadata neighborhoods carry
signal the features alone do not. The three metadata kinds are generated at
different signal strengths (tags strongest, then groups, then sets).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, ImageRecord, MetadataKind
from .util import ValidationError


@dataclass(frozen=True)
class KindParams:
    vocab_size: int
    terms_per_image: float  # Poisson mean, minimum 1 per image
    noise: float  # probability a term is drawn from the global distribution


@dataclass
class SynthConfig:
    n_images: int = 6000
    n_topics: int = 12
    n_labels: int = 24
    d: int = 64
    seed: int = 0
    ambiguous_fraction: float = 0.3
    blend: float = 0.35  # weight of the true topic's centroid in ambiguous features
    feature_noise: float = 1.0
    label_noise: float = 0.2  # Poisson mean of extra random labels per image
    concentration: float = 0.8  # within-topic Zipf exponent for term draws
    tags: KindParams = field(default_factory=lambda: KindParams(600, 14.0, 0.08))
    groups: KindParams = field(default_factory=lambda: KindParams(400, 9.0, 0.22))
    sets: KindParams = field(default_factory=lambda: KindParams(500, 6.0, 0.30))

    def __post_init__(self):
        if not (0.0 <= self.ambiguous_fraction <= 1.0):
            raise ValidationError("ambiguous_fraction must be in [0, 1]")
        if self.n_topics > self.n_labels:
            raise ValidationError("need n_topics <= n_labels")
        if self.n_topics < 2 and self.ambiguous_fraction > 0:
            raise ValidationError("ambiguity needs at least two topics")
        if not (0.0 <= self.blend <= 1.0):
            raise ValidationError("blend must be in [0, 1]")

    def kind_params(self, kind: MetadataKind) -> KindParams:
        return {
            MetadataKind.TAGS: self.tags,
            MetadataKind.GROUPS: self.groups,
            MetadataKind.SETS: self.sets,
        }[kind]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        for name in ("tags", "groups", "sets"):
            if name in obj and isinstance(obj[name], dict):
                obj[name] = KindParams(**obj[name])
        return cls(**obj)


@dataclass
class SynthProvenance:
    """Ground truth about the generative process, for analyses and oracles."""

    config: SynthConfig
    topics: np.ndarray  # (N,) topic per image
    second_topics: np.ndarray  # (N,) blend partner, -1 for clean images
    ambiguous: np.ndarray  # (N,) bool
    topic_labels: list[list[int]]  # label block per topic
    topic_terms: dict[str, list[list[int]]]  # kind -> per-topic preferred terms

    def save(self, path) -> None:
        payload = {
            "config": self.config.to_dict(),
            "topics": self.topics.tolist(),
            "second_topics": self.second_topics.tolist(),
            "ambiguous": [bool(a) for a in self.ambiguous],
            "topic_labels": self.topic_labels,
            "topic_terms": self.topic_terms,
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SynthProvenance":
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return cls(
            config=SynthConfig.from_dict(payload["config"]),
            topics=np.array(payload["topics"], dtype=np.int64),
            second_topics=np.array(payload["second_topics"], dtype=np.int64),
            ambiguous=np.array(payload["ambiguous"], dtype=bool),
            topic_labels=payload["topic_labels"],
            topic_terms=payload["topic_terms"],
        )


def topic_label_blocks(n_topics: int, n_labels: int) -> list[list[int]]:
    """Partition the label space into contiguous per-topic blocks."""
    bounds = [round(t * n_labels / n_topics) for t in range(n_topics + 1)]
    return [list(range(bounds[t], bounds[t + 1])) for t in range(n_topics)]


def _topic_term_blocks(n_topics: int, vocab_size: int) -> list[list[int]]:
    block = vocab_size // n_topics
    if block < 1:
        raise ValidationError(f"vocabulary of {vocab_size} too small for {n_topics} topics")
    return [list(range(t * block, (t + 1) * block)) for t in range(n_topics)]


def _zipf_cumulative(size: int, exponent: float) -> np.ndarray:
    weights = np.arange(1, size + 1, dtype=np.float64) ** -exponent
    cum = np.cumsum(weights)
    return cum / cum[-1]


def _draw_terms(rng, n: int, block: list[int], cum: np.ndarray, vocab_size: int,
                noise: float) -> np.ndarray:
    """Draw n distinct terms: topic-block Zipf draws mixed with uniform noise."""
    n = min(n, vocab_size)
    out: set[int] = set()
    attempts = 0
    limit = 40 * n + 40
    while len(out) < n and attempts < limit:
        attempts += 1
        if rng.random() < noise:
            out.add(int(rng.integers(vocab_size)))
        else:
            out.add(block[int(np.searchsorted(cum, rng.random()))])
    return np.array(sorted(out), dtype=np.int64)


def synth_generate(config: SynthConfig) -> tuple[Corpus, SynthProvenance]:
    """Generate a corpus plus its provenance sidecar; byte-identical output
    for a fixed config."""
    rng = np.random.default_rng(config.seed)
    n, k, n_labels, d = config.n_images, config.n_topics, config.n_labels, config.d

    centroids = rng.normal(0.0, 1.0, size=(k, d))
    topics = rng.integers(0, k, size=n)

    n_ambiguous = math.ceil(config.ambiguous_fraction * n)
    ambiguous = np.zeros(n, dtype=bool)
    second = np.full(n, -1, dtype=np.int64)
    if n_ambiguous:
        chosen = rng.choice(n, size=n_ambiguous, replace=False)
        ambiguous[chosen] = True
        for i in chosen:
            # blend partner differs from the true topic
            second[i] = (topics[i] + 1 + rng.integers(k - 1)) % k

    label_blocks = topic_label_blocks(k, n_labels)
    label_sets: list[frozenset[int]] = []
    for i in range(n):
        labels = set(label_blocks[topics[i]])
        for _ in range(rng.poisson(config.label_noise)):
            labels.add(int(rng.integers(n_labels)))
        label_sets.append(frozenset(labels))

    term_blocks: dict[MetadataKind, list[list[int]]] = {}
    cums: dict[MetadataKind, np.ndarray] = {}
    metadata: list[dict[MetadataKind, np.ndarray]] = [dict() for _ in range(n)]
    for kind in MetadataKind:
        params = config.kind_params(kind)
        blocks = _topic_term_blocks(k, params.vocab_size)
        term_blocks[kind] = blocks
        cums[kind] = _zipf_cumulative(len(blocks[0]), config.concentration)
        for i in range(n):
            count = max(1, int(rng.poisson(params.terms_per_image)))
            metadata[i][kind] = _draw_terms(
                rng, count, blocks[topics[i]], cums[kind], params.vocab_size, params.noise
            )

    mu = centroids[topics].copy()
    if n_ambiguous:
        amb = np.nonzero(ambiguous)[0]
        mu[amb] = config.blend * centroids[topics[amb]] + (1.0 - config.blend) * centroids[second[amb]]
    features = (mu + config.feature_noise * rng.normal(0.0, 1.0, size=(n, d))).astype(np.float32)

    images = [
        ImageRecord(id=i, features=features[i], labels=label_sets[i], metadata=metadata[i])
        for i in range(n)
    ]
    vocab = {
        kind: [f"{kind.value}_{t:05d}" for t in range(config.kind_params(kind).vocab_size)]
        for kind in MetadataKind
    }
    corpus = Corpus(
        images=images,
        label_names=[f"label_{c:02d}" for c in range(n_labels)],
        vocab=vocab,
        d=d,
    )
    provenance = SynthProvenance(
        config=config,
        topics=topics,
        second_topics=second,
        ambiguous=ambiguous,
        topic_labels=label_blocks,
        topic_terms={kind.value: term_blocks[kind] for kind in MetadataKind},
    )
    return corpus, provenance


def write_synth_corpus(config: SynthConfig, out_dir) -> tuple[Corpus, SynthProvenance]:
    """Generate and persist a corpus directory plus provenance.json."""
    from .corpus import save_corpus_dir

    corpus, provenance = synth_generate(config)
    root = Path(out_dir)
    save_corpus_dir(corpus, root)
    provenance.save(root / "provenance.json")
    with open(root / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    return corpus, provenance
