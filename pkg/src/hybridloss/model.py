"""Linear scoring shared by flat multiclass and chain models.

A flat model scores label ``y`` for observation ``x`` as ``<w, phi(x, y)>``
where the per-label feature vectors are supplied precomputed on each
instance.  Ties in an argmax always resolve to the lowest label index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSet:
    size: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"label set needs at least 2 labels, got {self.size}")
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != self.size or len(set(names)) != self.size:
                raise ValueError("label names must be exactly `size` distinct strings")
            object.__setattr__(self, "names", names)

    def index(self, name: str) -> int:
        if self.names is None:
            raise KeyError(name)
        return self.names.index(name)


@dataclass(frozen=True)
class FeatureVector:
    """Sparse feature vector: index -> value, zeros never stored."""

    entries: Mapping[int, float]
    dimension: int

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("feature dimension must be positive")
        clean = {}
        for i, v in dict(self.entries).items():
            i = int(i)
            if i < 0 or i >= self.dimension:
                raise IndexError(f"feature index {i} outside dimension {self.dimension}")
            v = float(v)
            if v != 0.0:
                clean[i] = v
        object.__setattr__(self, "entries", dict(sorted(clean.items())))

    @classmethod
    def from_dense(cls, values: Sequence[float]) -> "FeatureVector":
        values = np.asarray(values, dtype=float)
        return cls({i: v for i, v in enumerate(values) if v != 0.0}, len(values))

    def dot(self, weights: np.ndarray) -> float:
        if len(weights) != self.dimension:
            raise DimensionError(
                f"weight length {len(weights)} does not match feature dimension {self.dimension}")
        return float(sum(v * weights[i] for i, v in self.entries.items()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dimension)
        for i, v in self.entries.items():
            out[i] = v
        return out


@dataclass(frozen=True)
class FlatInstance:
    features_per_label: tuple[FeatureVector, ...]
    gold_label: int

    def __post_init__(self):
        feats = tuple(self.features_per_label)
        object.__setattr__(self, "features_per_label", feats)
        if len(feats) < 2:
            raise ValueError("a flat instance needs features for at least 2 labels")
        dims = {f.dimension for f in feats}
        if len(dims) != 1:
            raise DimensionError(f"per-label feature dimensions differ: {sorted(dims)}")
        if not 0 <= self.gold_label < len(feats):
            raise IndexError(f"gold label {self.gold_label} outside [0, {len(feats)})")

    @property
    def label_count(self) -> int:
        return len(self.features_per_label)

    @property
    def dimension(self) -> int:
        return self.features_per_label[0].dimension


def block_features(x: Sequence[float], label_count: int) -> tuple[FeatureVector, ...]:
    """Per-label copies of ``x`` placed in disjoint blocks (one weight block per label)."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    nz = np.flatnonzero(x)
    return tuple(
        FeatureVector({y * d + int(i): x[i] for i in nz}, label_count * d)
        for y in range(label_count))


def _check_finite(scores: np.ndarray):
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")


def score_flat(weights: np.ndarray, instance: FlatInstance) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    if len(weights) != instance.dimension:
        raise DimensionError(
            f"weight length {len(weights)} does not match feature dimension {instance.dimension}")
    return np.array([f.dot(weights) for f in instance.features_per_label])


def predict(scores: np.ndarray) -> int:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("cannot predict from an empty score vector")
    _check_finite(scores)
    # np.argmax returns the first maximal index
    return int(np.argmax(scores))


def logsumexp(scores: np.ndarray, axis: int | None = None) -> np.ndarray | float:
    scores = np.asarray(scores, dtype=float)
    top = np.max(scores, axis=axis, keepdims=True)
    out = top + np.log(np.sum(np.exp(scores - top), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    return scores - np.expand_dims(logsumexp(scores, axis=axis), axis)


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    _check_finite(scores)
    z = np.exp(scores - np.max(scores, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


def best_other(scores: np.ndarray, gold: int) -> int:
    """Index of the highest score excluding ``gold`` (lowest index on ties)."""
    scores = np.asarray(scores, dtype=float)
    k = len(scores)
    if k < 2:
        raise ValueError("need at least 2 labels")
    if not 0 <= gold < k:
        raise IndexError(f"gold label {gold} outside [0, {k})")
    masked = scores.copy()
    masked[gold] = -np.inf
    return int(np.argmax(masked))


def margin(scores: np.ndarray, gold: int) -> float:
    scores = np.asarray(scores, dtype=float)
    return float(scores[gold] - scores[best_other(scores, gold)])


@dataclass
class FlatDataset:
    """Stacked flat instances for batch evaluation.

    ``phi`` is a CSR matrix of shape ``(m * k, n)``; row ``i * k + y`` holds
    phi(x_i, y).  ``counts`` gives each instance's multiplicity (all ones
    unless built by :meth:`compress`).
    """

    phi: sp.csr_matrix
    gold: np.ndarray
    label_count: int
    counts: np.ndarray | None = None
    # dense (m, d) observations when phi is the block layout of them
    blocks: np.ndarray | None = field(default=None, repr=False)
    dimension: int = field(init=False)

    def __post_init__(self):
        self.phi = sp.csr_matrix(self.phi, dtype=float)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        self.counts = np.ones(len(self.gold)) if self.counts is None else np.asarray(self.counts, dtype=float)
        if self.counts.shape != self.gold.shape:
            raise DimensionError("one count per instance required")
        k = self.label_count
        if self.phi.shape[0] != len(self.gold) * k:
            raise DimensionError(
                f"feature rows {self.phi.shape[0]} != instances {len(self.gold)} x labels {k}")
        if len(self.gold) and (self.gold.min() < 0 or self.gold.max() >= k):
            raise IndexError("gold label out of range")
        self.dimension = self.phi.shape[1]
        if self.blocks is not None:
            self.blocks = np.asarray(self.blocks, dtype=float)
            if self.blocks.shape[0] != len(self.gold) or self.blocks.shape[1] * k != self.dimension:
                raise DimensionError("blocks do not match the feature matrix")

    def __len__(self) -> int:
        return len(self.gold)

    @classmethod
    def from_instances(cls, instances: Sequence[FlatInstance]) -> "FlatDataset":
        if not instances:
            raise ValueError("empty dataset")
        k = instances[0].label_count
        n = instances[0].dimension
        rows, cols, vals = [], [], []
        for i, inst in enumerate(instances):
            if inst.label_count != k or inst.dimension != n:
                raise DimensionError("instances disagree on label count or dimension")
            for y, f in enumerate(inst.features_per_label):
                for j, v in f.entries.items():
                    rows.append(i * k + y)
                    cols.append(j)
                    vals.append(v)
        phi = sp.csr_matrix((vals, (rows, cols)), shape=(len(instances) * k, n))
        return cls(phi, [inst.gold_label for inst in instances], k)

    @classmethod
    def from_observations(cls, x: np.ndarray, labels: np.ndarray, label_count: int) -> "FlatDataset":
        """Block features: label y reads x through weight block y."""
        x = np.asarray(x, dtype=float)
        m, d = x.shape
        k = label_count
        ii, jj = np.nonzero(x)
        vals = x[ii, jj]
        # row i*k+y holds x_i at columns [y*d, (y+1)*d)
        rows = (ii[None, :] * k + np.arange(k)[:, None]).ravel()
        cols = (jj[None, :] + d * np.arange(k)[:, None]).ravel()
        phi = sp.csr_matrix((np.tile(vals, k), (rows, cols)), shape=(m * k, k * d))
        return cls(phi, labels, k, blocks=x)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def compress(self) -> "FlatDataset":
        """Merge identical (features, gold) instances into weighted ones.

        First occurrences keep their original order, so the result is
        deterministic.
        """
        k = self.label_count
        phi = self.phi.tocsr()
        phi.sort_indices()
        keys = {}
        order = []
        counts = []
        for i in range(len(self.gold)):
            block = phi[i * k:(i + 1) * k]
            key = (int(self.gold[i]), block.indptr.tobytes(), block.indices.tobytes(), block.data.tobytes())
            j = keys.get(key)
            if j is None:
                keys[key] = len(order)
                order.append(i)
                counts.append(self.counts[i])
            else:
                counts[j] += self.counts[i]
        rows = (np.asarray(order)[:, None] * k + np.arange(k)).ravel()
        blocks = None if self.blocks is None else self.blocks[order]
        return FlatDataset(phi[rows], self.gold[order], k, np.asarray(counts), blocks)

    def instance(self, i: int) -> FlatInstance:
        k = self.label_count
        feats = []
        for y in range(k):
            row = self.phi.getrow(i * k + y)
            feats.append(FeatureVector(dict(zip(row.indices.tolist(), row.data.tolist())), self.dimension))
        return FlatInstance(tuple(feats), int(self.gold[i]))

    def scores(self, weights: np.ndarray) -> np.ndarray:
        weights = np.asarray(weights, dtype=float)
        if len(weights) != self.dimension:
            raise DimensionError(
                f"weight length {len(weights)} does not match feature dimension {self.dimension}")
        if self.blocks is not None:
            return self.blocks @ weights.reshape(self.label_count, -1).T
        return (self.phi @ weights).reshape(len(self.gold), self.label_count)

    def weight_gradient(self, score_gradient: np.ndarray) -> np.ndarray:
        """Chain rule from an ``(m, k)`` score gradient to weight space."""
        if self.blocks is not None:
            return (score_gradient.T @ self.blocks).ravel()
        return np.asarray(self.phi.T @ score_gradient.ravel()).ravel()

    def predict(self, weights: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(weights), axis=1)
