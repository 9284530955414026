"""Seeded generators for the synthetic experiments.

Every generator draws from ``numpy.random.Generator(PCG64(seed))``.  PCG64 is
a fixed, documented algorithm (O'Neill's PCG-XSL-RR 128/64), so a seed pins
the dataset independently of platform.  Sub-streams (train / validation /
test) come from ``SeedSequence(seed).spawn``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import ChainInstance, ChainModel
from .model import FeatureVector, FlatDataset

MIXED_SIZES = (30, 60, 100, 300, 600, 1000)
NONDOMINANT_CONSTANT = (1.0, 1.0)
_LOG_FLOOR = float(np.log(1e-12))


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _streams(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(count)]


# --- single-observation, non-dominant labels ------------------------------

@dataclass(frozen=True)
class NonDominantSpec:
    label_count: int
    sample_count: int
    seed: int
    top_prob: float = 0.46

    def __post_init__(self):
        if not 3 <= self.label_count <= 10:
            raise ValueError("label_count must lie in [3, 10]")
        if not 0 < self.top_prob < 0.5:
            raise ValueError("top_prob must be below 1/2 for a non-dominant distribution")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")

    def distribution(self) -> np.ndarray:
        k = self.label_count
        rest = (1.0 - self.top_prob) / (k - 1)
        return np.array([self.top_prob] + [rest] * (k - 1))


@dataclass
class NonDominantData:
    data: FlatDataset
    distribution: np.ndarray
    observation: np.ndarray


def generate_nondominant(spec: NonDominantSpec) -> NonDominantData:
    """One observation shared by all samples; label 0 carries ``top_prob``."""
    rng = rng_for(spec.seed)
    q = spec.distribution()
    labels = rng.choice(spec.label_count, size=spec.sample_count, p=q)
    x = np.tile(np.asarray(NONDOMINANT_CONSTANT), (spec.sample_count, 1))
    return NonDominantData(FlatDataset.from_observations(x, labels, spec.label_count), q,
                           np.asarray(NONDOMINANT_CONSTANT))


# --- dominant / non-dominant mixture -------------------------------------

@dataclass(frozen=True)
class MixedSpec:
    rho: float
    sample_count: int
    seed: int
    feature_dim: int = 100
    label_count: int = 5
    dominant_mean_base: float = 1.0
    dominant_sigma: float = 0.6
    nondominant_top_prob: float = 0.4
    nondominant_other_prob: float = 0.15
    nondominant_magnitude: float = 5.0
    heldout_size: int = 1000
    bias_value: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        total = self.nondominant_top_prob + (self.label_count - 1) * self.nondominant_other_prob
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"non-dominant label probabilities sum to {total}, not 1")
        if self.sample_count < 1:
            raise ValueError("sample_count must be positive")

    def nondominant_vector(self) -> np.ndarray:
        """Alternating +-magnitude pattern, orthogonal to the dominant class means for even dimension."""
        signs = np.where(np.arange(self.feature_dim) % 2 == 0, 1.0, -1.0)
        return self.nondominant_magnitude * signs

    def nondominant_distribution(self) -> np.ndarray:
        q = np.full(self.label_count, self.nondominant_other_prob)
        q[0] = self.nondominant_top_prob
        return q


@dataclass
class MixedSplit:
    data: FlatDataset
    x: np.ndarray
    labels: np.ndarray
    nondominant: np.ndarray


@dataclass
class MixedData:
    train: MixedSplit
    validation: MixedSplit
    test: MixedSplit


def _mixed_split(spec: MixedSpec, size: int, rng: np.random.Generator) -> MixedSplit:
    k, d = spec.label_count, spec.feature_dim
    nd = rng.random(size) < spec.rho
    labels = np.where(nd, rng.choice(k, size=size, p=spec.nondominant_distribution()),
                      rng.integers(0, k, size=size))
    # 0-based class y is 1-based class y + 1, so its mean is base + (y + 1)
    means = spec.dominant_mean_base + (labels + 1.0)
    noise = rng.normal(0.0, spec.dominant_sigma, size=(size, d))
    x = np.where(nd[:, None], spec.nondominant_vector()[None, :], means[:, None] + noise)
    if spec.bias_value:
        # a large constant keeps the shared intercept nearly unpenalized
        x = np.hstack([x, np.full((size, 1), spec.bias_value)])
    return MixedSplit(FlatDataset.from_observations(x, labels, k), x, labels, nd)


def generate_mixed(spec: MixedSpec) -> MixedData:
    train_rng, val_rng, test_rng = _streams(spec.seed, 3)
    return MixedData(_mixed_split(spec, spec.sample_count, train_rng),
                     _mixed_split(spec, spec.heldout_size, val_rng),
                     _mixed_split(spec, spec.heldout_size, test_rng))


# --- synthetic BIO chunking corpus ---------------------------------------

@dataclass(frozen=True)
class SynthChunkSpec:
    """Corpus drawn from a BIO hidden Markov chain.

    A token is *ambiguous* with probability ``ambiguity_rate``: it is drawn
    from a word pool shared by two tags, so only context separates them.
    ``ambiguous_sentence_fraction`` limits ambiguity to that share of
    sentences; the rest use only tag-specific words.
    """

    sentence_count: int = 1000
    min_length: int = 6
    max_length: int = 14
    chunk_types: tuple[str, ...] = ("NP", "VP")
    clean_vocab_per_tag: int = 20
    ambiguous_vocab_per_pair: int = 5
    ambiguity_rate: float = 0.5
    ambiguous_sentence_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ValueError("ambiguity_rate must lie in [0, 1]")
        if not 0.0 <= self.ambiguous_sentence_fraction <= 1.0:
            raise ValueError("ambiguous_sentence_fraction must lie in [0, 1]")
        if not 1 <= self.min_length <= self.max_length:
            raise ValueError("need 1 <= min_length <= max_length")
        if self.sentence_count < 0 or self.clean_vocab_per_tag < 1 or self.ambiguous_vocab_per_pair < 1:
            raise ValueError("counts must be positive")

    @property
    def tags(self) -> tuple[str, ...]:
        out = ["O"]
        for c in self.chunk_types:
            out += [f"B-{c}", f"I-{c}"]
        return tuple(out)


@dataclass
class ChunkCorpus:
    instances: list[ChainInstance]
    vocabulary: list[str]
    tags: list[str]
    true_model: ChainModel | None = field(default=None, repr=False)

    def tokens(self, instance: ChainInstance) -> list[str]:
        out = []
        for f in instance.observations:
            if len(f.entries) != 1:
                raise ValueError("observation is not a single vocabulary item")
            out.append(self.vocabulary[next(iter(f.entries))])
        return out

    def subset(self, indices) -> "ChunkCorpus":
        return ChunkCorpus([self.instances[i] for i in indices], self.vocabulary, self.tags, self.true_model)


def bio_chain(tags: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Start and transition probabilities of the generating chain."""
    t = len(tags)
    begins = [i for i, s in enumerate(tags) if s.startswith("B-")]
    start = np.zeros(t)
    start[0] = 0.4
    start[begins] = 0.6 / len(begins)
    trans = np.zeros((t, t))
    for a, name in enumerate(tags):
        if name == "O":
            trans[a, 0] = 0.4
            trans[a, begins] = 0.6 / len(begins)
        else:
            inside = tags.index("I-" + name[2:])
            stay = 0.6 if name.startswith("B-") else 0.3
            trans[a, inside] = stay
            trans[a, 0] = 0.2 if name.startswith("B-") else 0.4
            rest = 1.0 - stay - trans[a, 0]
            trans[a, begins] += rest / len(begins)
    return start, trans


def generate_chunk_corpus(spec: SynthChunkSpec) -> ChunkCorpus:
    tags = spec.tags
    t = len(tags)
    vc, va = spec.clean_vocab_per_tag, spec.ambiguous_vocab_per_pair
    vocab = [f"{tags[s]}:{i}" for s in range(t) for i in range(vc)]
    # pool s is shared by tags s and (s + 1) mod t
    vocab += [f"{tags[s]}|{tags[(s + 1) % t]}:{i}" for s in range(t) for i in range(va)]
    n = len(vocab)
    start, trans = bio_chain(tags)
    rng = rng_for(spec.seed)

    instances = []
    for _ in range(spec.sentence_count):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        ambiguous_sentence = rng.random() < spec.ambiguous_sentence_fraction
        seq = [int(rng.choice(t, p=start))]
        for _ in range(length - 1):
            seq.append(int(rng.choice(t, p=trans[seq[-1]])))
        words = []
        for s in seq:
            u = rng.random()
            if ambiguous_sentence and u < spec.ambiguity_rate:
                pool = s if rng.random() < 0.5 else (s - 1) % t
                words.append(t * vc + pool * va + int(rng.integers(va)))
            else:
                words.append(s * vc + int(rng.integers(vc)))
        obs = tuple(FeatureVector({w: 1.0}, n) for w in words)
        instances.append(ChainInstance(obs, tuple(seq)))

    # Posterior of the generator as a chain model: compatible (word, tag)
    # pairs share one emission weight, incompatible ones get the log floor.
    emission = np.full((n, t), _LOG_FLOOR)
    for s in range(t):
        emission[s * vc:(s + 1) * vc, s] = 0.0
        pool = slice(t * vc + s * va, t * vc + (s + 1) * va)
        emission[pool, s] = 0.0
        emission[pool, (s + 1) % t] = 0.0
    with np.errstate(divide="ignore"):
        true = ChainModel(emission, np.maximum(np.log(trans), _LOG_FLOOR),
                          np.maximum(np.log(start), _LOG_FLOOR), np.zeros(t))
    return ChunkCorpus(instances, vocab, list(tags), true)
