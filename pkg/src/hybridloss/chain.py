"""Linear-chain model: forward-backward, Viterbi, 2-best Viterbi, losses.

Sequence score::

    start[y_0] + sum_j <x_j, E[:, y_j]> + sum_j T[y_j, y_{j+1}] + end[y_{L-1}]

All dynamic programs run in natural-log space and are vectorised over a
padded batch of sentences; the single-instance functions wrap a batch of one.
Ties resolve to the lowest tag index at every backtrack step.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .losses import LossSpec
from .model import DimensionError, FeatureVector


@dataclass(frozen=True)
class ChainInstance:
    observations: tuple[FeatureVector, ...]
    gold_tags: tuple[int, ...]

    def __post_init__(self):
        obs = tuple(self.observations)
        tags = tuple(int(t) for t in self.gold_tags)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "gold_tags", tags)
        if len(obs) < 1:
            raise ValueError("a chain instance needs at least one position")
        if len(obs) != len(tags):
            raise ValueError(f"{len(obs)} observations but {len(tags)} tags")
        if len({f.dimension for f in obs}) != 1:
            raise DimensionError("observation feature dimensions differ within a sentence")

    @property
    def length(self) -> int:
        return len(self.observations)

    @property
    def dimension(self) -> int:
        return self.observations[0].dimension


@dataclass(frozen=True, eq=False)
class ChainModel:
    """Weights of a first-order chain.

    ``emission`` has shape ``(n_features, tag_count)``; ``transition[a, b]``
    scores tag ``a`` followed by tag ``b``.
    """

    emission: np.ndarray
    transition: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def __post_init__(self):
        for name in ("emission", "transition", "start", "end"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} weights must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        t = self.tag_count
        if self.emission.ndim != 2 or self.transition.shape != (t, t) \
                or self.start.shape != (t,) or self.end.shape != (t,):
            raise DimensionError("inconsistent chain weight shapes")

    @property
    def tag_count(self) -> int:
        return self.emission.shape[1]

    @property
    def feature_count(self) -> int:
        return self.emission.shape[0]

    @property
    def size(self) -> int:
        n, t = self.emission.shape
        return n * t + t * t + 2 * t

    @classmethod
    def zeros(cls, feature_count: int, tag_count: int) -> "ChainModel":
        t = tag_count
        return cls(np.zeros((feature_count, t)), np.zeros((t, t)), np.zeros(t), np.zeros(t))

    @classmethod
    def random(cls, feature_count: int, tag_count: int, rng: np.random.Generator,
               scale: float = 1.0) -> "ChainModel":
        t = tag_count
        return cls(rng.normal(0, scale, (feature_count, t)), rng.normal(0, scale, (t, t)),
                   rng.normal(0, scale, t), rng.normal(0, scale, t))

    def pack(self) -> np.ndarray:
        return np.concatenate([self.emission.ravel(), self.transition.ravel(), self.start, self.end])

    @classmethod
    def unpack(cls, vector: np.ndarray, feature_count: int, tag_count: int) -> "ChainModel":
        n, t = feature_count, tag_count
        vector = np.asarray(vector, dtype=float)
        if len(vector) != n * t + t * t + 2 * t:
            raise DimensionError(f"parameter vector of length {len(vector)} does not fit n={n}, t={t}")
        a = n * t
        b = a + t * t
        return cls(vector[:a].reshape(n, t), vector[a:b].reshape(t, t), vector[b:b + t], vector[b + t:])


@dataclass(frozen=True)
class ChainPosterior:
    log_partition: float
    node_marginals: np.ndarray
    edge_marginals: np.ndarray


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    top = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    return np.squeeze(safe + np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)), axis=axis)


class ChainBatch:
    """Sentences packed for vectorised inference.

    ``X`` stacks every position's features (CSR, one row per token);
    ``index[b, j]`` is the row of position ``j`` in sentence ``b`` or -1.
    """

    def __init__(self, instances: Sequence[ChainInstance], feature_count: int | None = None):
        if not instances:
            raise ValueError("empty batch")
        n = instances[0].dimension if feature_count is None else feature_count
        self.instances = list(instances)
        self.lengths = np.array([inst.length for inst in instances], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])
        rows, cols, vals = [], [], []
        r = 0
        for inst in instances:
            if inst.dimension != n:
                raise DimensionError(f"instance feature dimension {inst.dimension} != model features {n}")
            for f in inst.observations:
                for j, v in f.entries.items():
                    rows.append(r)
                    cols.append(j)
                    vals.append(v)
                r += 1
        self.X = sp.csr_matrix((vals, (rows, cols)), shape=(r, n))
        self.gold = np.concatenate([np.asarray(inst.gold_tags, dtype=np.int64) for inst in instances])
        B, L = len(instances), int(self.lengths.max())
        pos = np.arange(L)
        self.mask = pos[None, :] < self.lengths[:, None]
        self.index = np.where(self.mask, self.offsets[:-1, None] + pos[None, :], -1)
        self.shape = (B, L)

    def __len__(self) -> int:
        return len(self.instances)

    def padded_emissions(self, model: ChainModel) -> np.ndarray:
        if self.X.shape[1] != model.feature_count:
            raise DimensionError(
                f"observation dimension {self.X.shape[1]} != model feature count {model.feature_count}")
        flat = np.asarray(self.X @ model.emission)
        em = flat[np.where(self.index >= 0, self.index, 0)]
        em[~self.mask] = 0.0
        return em

    def split(self, flat_tags: np.ndarray) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in flat_tags[a:b]) for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def _path_arrays(batch: ChainBatch, flat_tags: np.ndarray) -> np.ndarray:
    B, L = batch.shape
    tags = np.zeros((B, L), dtype=np.int64)
    tags[batch.mask] = flat_tags
    return tags


def batch_path_scores(model: ChainModel, batch: ChainBatch, flat_tags: np.ndarray,
                      em: np.ndarray | None = None) -> np.ndarray:
    if em is None:
        em = batch.padded_emissions(model)
    tags = _path_arrays(batch, flat_tags)
    B, L = batch.shape
    rows = np.arange(B)
    score = model.start[tags[:, 0]] + model.end[tags[rows, batch.lengths - 1]]
    score = score + np.sum(np.where(batch.mask, np.take_along_axis(em, tags[:, :, None], 2)[:, :, 0], 0.0), axis=1)
    if L > 1:
        trans = model.transition[tags[:, :-1], tags[:, 1:]]
        score = score + np.sum(np.where(batch.mask[:, 1:], trans, 0.0), axis=1)
    return score


def batch_forward_backward(model: ChainModel, batch: ChainBatch, em: np.ndarray | None = None):
    """Returns (log_Z per sentence, alpha, beta, emissions), shapes (B,), (B,L,t) x2."""
    if em is None:
        em = batch.padded_emissions(model)
    B, L = batch.shape
    T = model.transition
    alpha = np.empty_like(em)
    alpha[:, 0] = model.start + em[:, 0]
    for j in range(1, L):
        new = em[:, j] + _lse(alpha[:, j - 1, :, None] + T[None], axis=1)
        alpha[:, j] = np.where(batch.mask[:, j, None], new, alpha[:, j - 1])
    log_z = _lse(alpha[:, -1] + model.end, axis=1)
    beta = np.empty_like(em)
    beta[:, -1] = model.end
    for j in range(L - 2, -1, -1):
        new = _lse(T[None] + (em[:, j + 1] + beta[:, j + 1])[:, None, :], axis=2)
        beta[:, j] = np.where(batch.mask[:, j + 1, None], new, model.end)
    return log_z, alpha, beta, em


def _expected_counts(model: ChainModel, batch: ChainBatch, log_z, alpha, beta, em):
    """Node and edge marginals (padded) for gradient assembly."""
    node = np.exp(alpha + beta - log_z[:, None, None])
    node[~batch.mask] = 0.0
    if batch.shape[1] > 1:
        edge = np.exp(alpha[:, :-1, :, None] + model.transition[None, None]
                      + (em[:, 1:] + beta[:, 1:])[:, :, None, :] - log_z[:, None, None, None])
        edge[~batch.mask[:, 1:]] = 0.0
    else:
        edge = np.zeros((batch.shape[0], 0, model.tag_count, model.tag_count))
    return node, edge


def _feature_gradient(model: ChainModel, batch: ChainBatch, node: np.ndarray, edge: np.ndarray,
                      weights: np.ndarray | None = None) -> np.ndarray:
    """Sum over sentences of (per-sentence weight) x feature counts given soft tag assignments."""
    if weights is not None:
        node = node * weights[:, None, None]
        edge = edge * weights[:, None, None, None]
    flat_node = node[batch.mask]
    g_em = np.asarray(batch.X.T @ flat_node)
    g_tr = edge.sum(axis=(0, 1))
    g_start = node[:, 0].sum(axis=0)
    rows = np.arange(batch.shape[0])
    g_end = node[rows, batch.lengths - 1].sum(axis=0)
    return np.concatenate([g_em.ravel(), g_tr.ravel(), g_start, g_end])


def _hard_counts(model: ChainModel, batch: ChainBatch, flat_tags: np.ndarray):
    t = model.tag_count
    tags = _path_arrays(batch, flat_tags)
    B, L = batch.shape
    node = np.zeros((B, L, t))
    np.put_along_axis(node, tags[:, :, None], 1.0, axis=2)
    node[~batch.mask] = 0.0
    edge = np.zeros((B, max(L - 1, 0), t, t))
    if L > 1:
        bi, ji = np.nonzero(batch.mask[:, 1:])
        edge[bi, ji, tags[bi, ji], tags[bi, ji + 1]] = 1.0
    return node, edge


def batch_viterbi(model: ChainModel, batch: ChainBatch, em: np.ndarray | None = None):
    """Best path per sentence: (flat tag array, scores)."""
    paths, scores = batch_two_best(model, batch, em)
    return paths[0], scores[:, 0]


def _top_two(values: np.ndarray, axis: int) -> np.ndarray:
    """Indices of the two largest entries along ``axis``, lowest index first on ties.

    Same result as a stable descending sort cut to two entries.
    """
    first = np.argmax(values, axis=axis)
    masked = values.copy()
    np.put_along_axis(masked, np.expand_dims(first, axis), -np.inf, axis=axis)
    second = np.argmax(masked, axis=axis)
    # all remaining entries -inf: argmax falls back to 0, which may be `first`
    second = np.where(second == first, (first == 0).astype(second.dtype), second)
    return np.stack([first, second], axis=axis)


def batch_two_best(model: ChainModel, batch: ChainBatch, em: np.ndarray | None = None):
    """Best and second-best distinct paths per sentence.

    Each trellis cell keeps two ranked partial paths.  Candidates are ordered
    previous-tag-major then by rank, and a stable sort keeps the lowest index
    first among equal scores; rank 0 therefore reproduces plain Viterbi.
    Returns ([flat best tags, flat second tags], scores of shape (B, 2)); the
    second score is ``-inf`` when no other path exists.
    """
    if em is None:
        em = batch.padded_emissions(model)
    B, L = batch.shape
    t = model.tag_count
    T = model.transition
    delta = np.full((B, L, t, 2), -np.inf)
    back = np.zeros((B, L, t, 2), dtype=np.int64)  # encodes prev_tag * 2 + prev_rank
    delta[:, 0, :, 0] = model.start + em[:, 0]
    for j in range(1, L):
        # cand[b, p, r, s] -> reshape to (B, 2t, t) with candidate index p*2 + r
        cand = delta[:, j - 1, :, :, None] + T[None, :, None, :]
        cand = cand.reshape(B, 2 * t, t)
        order = _top_two(cand, axis=1)
        top = np.take_along_axis(cand, order, axis=1)
        new = top.transpose(0, 2, 1) + em[:, j, :, None]
        live = batch.mask[:, j, None, None]
        delta[:, j] = np.where(live, new, delta[:, j - 1])
        back[:, j] = np.where(live, order.transpose(0, 2, 1), 2 * np.arange(t)[None, :, None] + np.arange(2))
    rows = np.arange(B)
    final = (delta[rows, L - 1] + model.end[None, :, None]).reshape(B, 2 * t)
    order = _top_two(final, axis=1)
    scores = np.take_along_axis(final, order, axis=1)
    paths = []
    for rank in range(2):
        state, r = np.divmod(order[:, rank], 2)
        out = np.empty((B, L), dtype=np.int64)
        # padded positions carry identity back-pointers, so every sentence
        # can start from column L - 1
        for j in range(L - 1, -1, -1):
            out[:, j] = state
            if j:
                state, r = np.divmod(back[rows, j, state, r], 2)
        paths.append(out[batch.mask])
    return paths, scores


def batch_loss_and_gradient(spec: LossSpec, model: ChainModel, batch: ChainBatch,
                            temperature: float | None = None):
    """Summed loss and summed gradient (packed layout) over the batch.

    With ``temperature`` set the hinge part is replaced by its smooth upper
    bound (see :func:`_smoothed_hinge`).
    """
    if temperature is not None and temperature <= 0:
        raise ValueError("temperature must be positive")
    em = batch.padded_emissions(model)
    alpha_w = spec.alpha
    gold_score = batch_path_scores(model, batch, batch.gold, em)
    gold_node, gold_edge = _hard_counts(model, batch, batch.gold)
    grad = np.zeros(model.size)
    value = 0.0
    if alpha_w > 0.0:
        log_z, a, b, _ = batch_forward_backward(model, batch, em)
        node, edge = _expected_counts(model, batch, log_z, a, b, em)
        value += alpha_w * float(np.sum(np.maximum(log_z - gold_score, 0.0)))
        grad += alpha_w * (_feature_gradient(model, batch, node, edge)
                           - _feature_gradient(model, batch, gold_node, gold_edge))
    if alpha_w < 1.0 and temperature is not None:
        h, h_grad = _smoothed_hinge(model, batch, em, gold_score, gold_node, gold_edge, temperature)
        value += (1 - alpha_w) * h
        grad += (1 - alpha_w) * h_grad
    elif alpha_w < 1.0:
        rival, rival_score = _competitors(model, batch, em)
        slack = 1.0 - (gold_score - rival_score)
        active = (slack > 0.0).astype(float)
        if active.any():
            value += (1 - alpha_w) * float(np.sum(slack * active))
            r_node, r_edge = _hard_counts(model, batch, rival)
            grad += (1 - alpha_w) * (_feature_gradient(model, batch, r_node, r_edge, active)
                                     - _feature_gradient(model, batch, gold_node, gold_edge, active))
    return value, grad


def _deviating_posterior(model: ChainModel, batch: ChainBatch, em: np.ndarray):
    """Log-sum and marginals over the paths that differ from gold somewhere.

    Forward-backward on a lattice whose states also record whether the path
    has left the gold path yet.  Summing only over deviating paths directly
    avoids ``log(Z - exp(gold score))``, which cancels when gold dominates.
    Returns (log_sum per sentence, node, edge) with padded shapes.
    """
    B, L = batch.shape
    t = model.tag_count
    T = model.transition
    gold = _path_arrays(batch, batch.gold)
    rows = np.arange(B)
    on_gold = np.arange(t)[None, None, :] == gold[:, :, None]
    log_z, alpha, beta, _ = batch_forward_backward(model, batch, em)
    gold_em = np.take_along_axis(em, gold[:, :, None], 2)[:, :, 0]
    # prefix score of the gold path, and deviated-prefix sums a[b, j, s]
    g = np.empty((B, L))
    a = np.empty((B, L, t))
    g[:, 0] = model.start[gold[:, 0]] + gold_em[:, 0]
    a[:, 0] = np.where(on_gold[:, 0], -np.inf, model.start + em[:, 0])
    for j in range(1, L):
        live = batch.mask[:, j]
        leave = np.where(on_gold[:, j], -np.inf, g[:, j - 1, None] + T[gold[:, j - 1]])
        stay = _lse(a[:, j - 1, :, None] + T[None], axis=1)
        a[:, j] = np.where(live[:, None], em[:, j] + np.logaddexp(stay, leave), a[:, j - 1])
        g[:, j] = np.where(live, g[:, j - 1] + T[gold[:, j - 1], gold[:, j]] + gold_em[:, j], g[:, j - 1])
    log_dev = _lse(a[:, -1] + model.end, axis=1)
    # suffix sums from a gold prefix that still have to deviate
    h = np.full((B, L), -np.inf)
    for j in range(L - 2, -1, -1):
        live = batch.mask[:, j + 1]
        nxt = em[:, j + 1] + T[gold[:, j]]
        leave = _lse(np.where(on_gold[:, j + 1], -np.inf, nxt + beta[:, j + 1]), axis=1)
        stay = nxt[rows, gold[:, j + 1]] + h[:, j + 1]
        h[:, j] = np.where(live, np.logaddexp(leave, stay), -np.inf)
    # padded positions may overflow; they are zeroed below
    with np.errstate(over="ignore"):
        norm = log_dev[:, None, None]
        node = np.exp(a + beta - norm) + np.where(on_gold, np.exp(g + h - log_dev[:, None])[:, :, None], 0.0)
        node[~batch.mask] = 0.0
        if L > 1:
            base = (em[:, 1:] + beta[:, 1:])[:, :, None, :]
            edge = np.exp(a[:, :-1, :, None] + T[None, None] + base - norm[..., None])
            nxt = np.where(on_gold[:, 1:], h[:, 1:, None], beta[:, 1:])
            from_gold = np.exp(g[:, :-1, None] + T[gold[:, :-1]] + em[:, 1:] + nxt - log_dev[:, None, None])
            bi, ji = np.nonzero(batch.mask[:, 1:])
            edge[bi, ji, gold[bi, ji]] += from_gold[bi, ji]
            edge[~batch.mask[:, 1:]] = 0.0
        else:
            edge = np.zeros((B, 0, t, t))
    return log_dev, node, edge


def _smoothed_hinge(model: ChainModel, batch: ChainBatch, em, gold_score, gold_node, gold_edge,
                    tau: float) -> tuple[float, np.ndarray]:
    """Sum over sentences of tau * log sum_y' exp((s(y') + [y' != y]) / tau) - s(y).

    An upper bound on the hinge, tight as ``tau`` goes to zero.
    """
    scaled = ChainModel(model.emission / tau, model.transition / tau, model.start / tau, model.end / tau)
    log_dev, node, edge = _deviating_posterior(scaled, batch, em / tau)
    u, v = gold_score / tau, log_dev + 1.0 / tau
    value = float(np.sum(tau * np.logaddexp(u, v) - gold_score))
    # share of the deviating paths in the smoothed max
    weight = np.exp(v - np.logaddexp(u, v))
    grad = (_feature_gradient(model, batch, node, edge, weight)
            - _feature_gradient(model, batch, gold_node, gold_edge, weight))
    return value, grad


def _competitors(model: ChainModel, batch: ChainBatch, em: np.ndarray):
    (best, second), scores = batch_two_best(model, batch, em)
    if np.any(~np.isfinite(scores[:, 1])):
        raise ValueError("no competitor exists: the tag space holds a single sequence")
    same = np.add.reduceat((best != batch.gold).astype(np.int64), batch.offsets[:-1]) == 0
    owner = np.repeat(same, batch.lengths)
    rival = np.where(owner, second, best)
    rival_score = np.where(same, scores[:, 1], scores[:, 0])
    return rival, rival_score


# --- single-instance API -------------------------------------------------

def _one(instance: ChainInstance, model: ChainModel) -> ChainBatch:
    return ChainBatch([instance], model.feature_count)


def _with_tags(instance: ChainInstance, tags: Sequence[int]) -> ChainInstance:
    tags = tuple(int(t) for t in tags)
    if len(tags) != instance.length:
        raise ValueError(f"tag sequence of length {len(tags)} for sentence of length {instance.length}")
    return ChainInstance(instance.observations, tags)


def sequence_score(model: ChainModel, instance: ChainInstance, tags: Sequence[int]) -> float:
    inst = _with_tags(instance, tags)
    if any(not 0 <= t < model.tag_count for t in inst.gold_tags):
        raise IndexError("tag outside the model's tag set")
    batch = _one(inst, model)
    return float(batch_path_scores(model, batch, batch.gold)[0])


def forward_backward(model: ChainModel, instance: ChainInstance) -> ChainPosterior:
    batch = _one(instance, model)
    log_z, a, b, em = batch_forward_backward(model, batch)
    node, edge = _expected_counts(model, batch, log_z, a, b, em)
    return ChainPosterior(float(log_z[0]), node[0], edge[0])


def log_partition(model: ChainModel, instance: ChainInstance) -> float:
    return float(batch_forward_backward(model, _one(instance, model))[0][0])


def sequence_log_probability(model: ChainModel, instance: ChainInstance, tags: Sequence[int]) -> float:
    value = sequence_score(model, instance, tags) - log_partition(model, instance)
    return min(value, 0.0)


def viterbi(model: ChainModel, instance: ChainInstance) -> tuple[tuple[int, ...], float]:
    batch = _one(instance, model)
    path, score = batch_viterbi(model, batch)
    return tuple(int(v) for v in path), float(score[0])


def best_competitor(model: ChainModel, instance: ChainInstance,
                    gold: Sequence[int]) -> tuple[tuple[int, ...], float]:
    inst = _with_tags(instance, gold)
    batch = _one(inst, model)
    rival, score = _competitors(model, batch, batch.padded_emissions(model))
    return tuple(int(v) for v in rival), float(score[0])


def chain_loss_and_gradient(spec: LossSpec, model: ChainModel,
                            instance: ChainInstance) -> tuple[float, ChainModel]:
    """Loss of one sentence and its gradient, shaped like the model."""
    value, grad = batch_loss_and_gradient(spec, model, _one(instance, model))
    return value, ChainModel.unpack(grad, model.feature_count, model.tag_count)


def enumerate_paths(length: int, tag_count: int):
    return product(range(tag_count), repeat=length)


def chain_objective(spec: LossSpec, batch: ChainBatch, feature_count: int, tag_count: int,
                    temperature: float | None = None):
    """Mean loss over the batch as a function of the packed weight vector."""
    m = len(batch)

    def objective(w: np.ndarray):
        model = ChainModel.unpack(w, feature_count, tag_count)
        value, grad = batch_loss_and_gradient(spec, model, batch, temperature)
        return value / m, grad / m

    objective.dimension = feature_count * tag_count + tag_count * tag_count + 2 * tag_count
    return objective
