"""Experiment pipelines: non-dominant sweep, mixed grid, synthetic chunking.

Every pipeline is a pure function of its config.  Rows are sorted before
writing and floats are written with ``repr`` so reruns give byte-identical
CSV files.  Hyperparameters are chosen on the validation split only; the
test split sits behind :class:`SealedSplits`, which refuses access until
selection is finished and keeps an audit log of the access order.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .chain import ChainBatch, ChainModel, batch_viterbi, chain_objective
from .consistency import dominance_profile
from .losses import LossSpec
from .metrics import chunk_f1, tie_aware_error
from .model import FlatDataset
from .optim import OptimConfig, OptimResult, minimize_smoothed, train_flat
from .synthdata import (MIXED_SIZES, ChunkCorpus, MixedSpec, NonDominantSpec, SynthChunkSpec,
                        generate_chunk_corpus, generate_mixed, generate_nondominant)

log = logging.getLogger(__name__)

EXPERIMENTS = ("nondominant-sweep", "mixed-grid", "chunking")
LOSSES = ("log", "hinge", "hybrid")
DEFAULT_ALPHAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DEFAULT_RHOS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
TIE_TOL = 1e-6


class SelectionOrderError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    losses: tuple[str, ...] = LOSSES
    alpha_grid: tuple[float, ...] = DEFAULT_ALPHAS
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDAS
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "results"
    max_iterations: int = 500
    stall_window: int | None = 25
    stall_tolerance: float = 1e-9
    # hinge smoothing warm start for flat training, see OptimConfig
    smoothing: tuple[float, ...] = (0.3, 0.03, 0.003)
    smoothing_iterations: int = 100
    # cap on the exact stage, applied in the mixed grid only; the sweep and
    # chunking run the exact stage to max_iterations (a capped hinge model
    # can still score worse than w = 0 on its own objective)
    polish_iterations: int | None = 50
    # non-dominant sweep
    label_counts: tuple[int, ...] = tuple(range(3, 11))
    sample_count: int = 10000
    top_prob: float = 0.46
    sweep_alpha: float = 0.5
    sweep_lambda: float = 1e-4
    # mixed grid
    rho_grid: tuple[float, ...] = DEFAULT_RHOS
    size_grid: tuple[int, ...] = MIXED_SIZES
    heldout_size: int = 1000
    # chunking
    sentence_count: int = 1000
    ambiguity_rate: float = 0.5
    ambiguous_sentence_fraction: float = 1.0
    portions: tuple[float, ...] = (0.1, 1.0)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        for name in ("losses", "alpha_grid", "lambda_grid", "seeds", "label_counts",
                     "rho_grid", "size_grid", "portions"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must not be empty")
            object.__setattr__(self, name, value)
        bad = set(self.losses) - set(LOSSES)
        if bad:
            raise ValueError(f"unknown losses {sorted(bad)}")
        if any(not 0.0 < a < 1.0 for a in self.alpha_grid):
            raise ValueError("hybrid alphas must lie strictly between 0 and 1")
        if any(lam < 0 for lam in self.lambda_grid):
            raise ValueError("lambda values must be non-negative")
        if any(not 0.0 < p <= 1.0 for p in self.portions):
            raise ValueError("training portions must lie in (0, 1]")

    def optim(self, lam: float, capped: bool = False) -> OptimConfig:
        return OptimConfig(lam=lam, max_iterations=self.max_iterations,
                           stall_window=self.stall_window, stall_tolerance=self.stall_tolerance,
                           smoothing=tuple(self.smoothing),
                           smoothing_iterations=self.smoothing_iterations,
                           polish_iterations=self.polish_iterations if capped else None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        out = dict(values)
        for k, v in out.items():
            if isinstance(v, list):
                out[k] = tuple(v)
        return cls(**out)


class SealedSplits:
    """Train / validation / test holder that opens the test split last.

    ``open("test")`` raises until :meth:`finish_selection` has been called.
    ``access_log`` records every access in order.
    """

    def __init__(self, train, validation, test):
        self._splits = {"train": train, "validation": validation, "test": test}
        self._selected = False
        self.access_log: list[str] = []

    def open(self, name: str):
        if name not in self._splits:
            raise KeyError(name)
        if name == "test" and not self._selected:
            raise SelectionOrderError("test split requested before model selection finished")
        self.access_log.append(name)
        return self._splits[name]

    def finish_selection(self):
        self._selected = True
        self.access_log.append("selection-done")


def audit_access(log_entries: Sequence[str]):
    """Raise unless every test access follows the end of selection."""
    done = False
    for entry in log_entries:
        if entry == "selection-done":
            done = True
        elif entry == "test" and not done:
            raise SelectionOrderError("test split accessed before selection finished")


@dataclass
class Candidate:
    spec: LossSpec
    lam: float
    score: float
    result: OptimResult
    extra: object = None


def loss_grid(loss: str, alphas: Sequence[float]) -> list[LossSpec]:
    if loss == "hybrid":
        return [LossSpec.hybrid(a) for a in alphas]
    return [LossSpec(loss)]


def select(candidates: Sequence[Candidate], higher_is_better: bool) -> Candidate:
    """Best validation score; ties go to the larger lambda, then the smaller alpha."""
    ordered = sorted(candidates, key=lambda c: (-c.lam, c.spec.alpha))
    sign = 1.0 if higher_is_better else -1.0
    best = ordered[0]
    for c in ordered[1:]:
        if sign * (c.score - best.score) > 1e-12:
            best = c
    return best


def format_cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def _status(result: OptimResult) -> str:
    if result.converged:
        return "converged"
    if result.exhausted:
        return "max_iterations"
    return "stopped"


# --- non-dominant sweep ----------------------------------------------------

@dataclass
class SweepResult:
    rows: list[tuple]
    flags: list[tuple]
    paths: list[Path] = field(default_factory=list)


def run_nondominant_sweep(config: ExperimentConfig, write: bool = True) -> SweepResult:
    rows, flags = [], []
    specs = []
    for loss in config.losses:
        specs.append(LossSpec.hybrid(config.sweep_alpha) if loss == "hybrid" else LossSpec(loss))
    for seed in config.seeds:
        for k in config.label_counts:
            gen = generate_nondominant(NonDominantSpec(k, config.sample_count, seed, config.top_prob))
            data = gen.data.compress()
            for spec in specs:
                result = train_flat(spec, data, config.optim(config.sweep_lambda))
                error = tie_aware_error(data.scores(result.weights), data.gold, data.counts, TIE_TOL)
                rows.append((k, spec.kind, spec.alpha, error, seed))
                status = _status(result)
                if status != "converged":
                    flags.append((k, spec.kind, spec.alpha, seed, status, result.final_gradient_norm))
    rows.sort(key=lambda r: (r[4], r[0], LOSSES.index(r[1])))
    flags.sort(key=lambda r: (r[3], r[0], LOSSES.index(r[1])))
    out = SweepResult(rows, flags)
    if write:
        root = Path(config.output_dir)
        out.paths.append(write_csv(root / "nondominant_sweep.csv", ("k", "loss", "alpha", "train_error", "seed"), rows))
        out.paths.append(write_csv(root / "nondominant_sweep_flags.csv",
                                   ("k", "loss", "alpha", "seed", "status", "gradient_norm"), flags))
    return out


# --- mixed grid ------------------------------------------------------------

@dataclass
class GridResult:
    rows: list[tuple]
    summary: list[tuple]
    access_logs: dict = field(default_factory=dict)
    paths: list[Path] = field(default_factory=list)


def _flat_accuracy(data: FlatDataset, weights: np.ndarray) -> float:
    return 1.0 - tie_aware_error(data.scores(weights), data.gold, data.counts, TIE_TOL)


def run_mixed_cell(config: ExperimentConfig, rho: float, m: int, seed: int) -> tuple[list[tuple], list[str]]:
    gen = generate_mixed(MixedSpec(rho, m, seed, heldout_size=config.heldout_size))
    splits = SealedSplits(gen.train.data, gen.validation.data, gen.test.data)
    train = splits.open("train").compress()
    validation = splits.open("validation")
    chosen = {}
    for loss in config.losses:
        candidates = []
        for spec in loss_grid(loss, config.alpha_grid):
            for lam in config.lambda_grid:
                result = train_flat(spec, train, config.optim(lam, capped=True))
                candidates.append(Candidate(spec, lam, _flat_accuracy(validation, result.weights), result))
        chosen[loss] = select(candidates, higher_is_better=True)
    splits.finish_selection()
    test = splits.open("test")
    rows = []
    for loss, c in chosen.items():
        rows.append((rho, m, seed, loss, c.spec.alpha, c.lam, c.score,
                     _flat_accuracy(test, c.result.weights), _status(c.result)))
    return rows, splits.access_log


def pairwise_summary(rows: Sequence[tuple]) -> list[tuple]:
    """Win/loss counts on test accuracy per pair of losses; ties not counted."""
    cells: dict = {}
    for rho, m, seed, loss, *_, test_acc, _status in rows:
        cells.setdefault((rho, m, seed), {})[loss] = test_acc
    out = []
    for a, b in (("hybrid", "hinge"), ("hybrid", "log"), ("hinge", "log")):
        wins = losses = 0
        for acc in cells.values():
            if a in acc and b in acc:
                d = acc[a] - acc[b]
                if d > 1e-12:
                    wins += 1
                elif d < -1e-12:
                    losses += 1
        if any(a in acc and b in acc for acc in cells.values()):
            out.append((f"{a}_vs_{b}", wins, losses))
    return out


def run_mixed_grid(config: ExperimentConfig, write: bool = True,
                   progress: Callable[[str], None] | None = None) -> GridResult:
    rows, logs = [], {}
    for seed in config.seeds:
        for rho in config.rho_grid:
            for m in config.size_grid:
                cell_rows, access = run_mixed_cell(config, rho, m, seed)
                audit_access(access)
                rows.extend(cell_rows)
                logs[(rho, m, seed)] = access
                if progress:
                    progress(f"rho={rho} m={m} seed={seed}")
    rows.sort(key=lambda r: (r[2], r[0], r[1], LOSSES.index(r[3])))
    summary = pairwise_summary(rows)
    out = GridResult(rows, summary, logs)
    if write:
        root = Path(config.output_dir)
        out.paths.append(write_csv(root / "mixed_grid.csv",
                                   ("rho", "m", "seed", "loss", "alpha", "lambda",
                                    "validation_accuracy", "test_accuracy", "status"), rows))
        out.paths.append(write_csv(root / "mixed_summary.csv", ("pair", "wins", "losses"), summary))
    return out


# --- synthetic chunking ----------------------------------------------------

@dataclass
class ChunkingResult:
    metrics: list[tuple]
    selection: list[tuple]
    dominance: list[tuple]
    dominance_summary: list[tuple]
    access_logs: dict = field(default_factory=dict)
    paths: list[Path] = field(default_factory=list)


def split_corpus(corpus: ChunkCorpus) -> tuple[ChunkCorpus, ChunkCorpus, ChunkCorpus]:
    """Train 20%, test 40%, validation 40%, in corpus order."""
    n = len(corpus.instances)
    n_train = int(round(0.2 * n))
    n_test = int(round(0.4 * n))
    idx = np.arange(n)
    return (corpus.subset(idx[:n_train]), corpus.subset(idx[n_train:n_train + n_test]),
            corpus.subset(idx[n_train + n_test:]))


def train_chain(spec: LossSpec, instances, feature_count: int, tag_count: int,
                config: OptimConfig) -> tuple[ChainModel, OptimResult]:
    batch = instances if isinstance(instances, ChainBatch) else ChainBatch(instances, feature_count)
    result = minimize_smoothed(lambda t: chain_objective(spec, batch, feature_count, tag_count, t),
                               spec, config, np.zeros((feature_count + tag_count + 2) * tag_count))
    return ChainModel.unpack(result.weights, feature_count, tag_count), result


def decode(model: ChainModel, batch: ChainBatch, tags: Sequence[str]) -> list[list[str]]:
    paths, _ = batch_viterbi(model, batch)
    return [[tags[i] for i in p] for p in batch.split(paths)]


def gold_tags(instances, tags: Sequence[str]) -> list[list[str]]:
    return [[tags[i] for i in inst.gold_tags] for inst in instances]


def _sorted_profile(source: str, split: str, profile) -> list[tuple]:
    gold = np.sort(profile.gold_prob)
    vit = np.sort(profile.viterbi_prob)
    return [(source, split, i, float(g), float(v)) for i, (g, v) in enumerate(zip(gold, vit))]


def run_chunking_seed(config: ExperimentConfig, seed: int) -> ChunkingResult:
    corpus = generate_chunk_corpus(SynthChunkSpec(
        sentence_count=config.sentence_count, ambiguity_rate=config.ambiguity_rate,
        ambiguous_sentence_fraction=config.ambiguous_sentence_fraction, seed=seed))
    n, t = len(corpus.vocabulary), len(corpus.tags)
    train_c, test_c, val_c = split_corpus(corpus)
    if not train_c.instances or not val_c.instances or not test_c.instances:
        raise ValueError("corpus too small for a 20/40/40 split")
    metrics, selection, dominance, dom_summary = [], [], [], []
    logs = {}
    profiled_model = None
    for portion in config.portions:
        splits = SealedSplits(train_c, val_c, test_c)
        train = splits.open("train").instances
        train = train[:max(1, int(round(portion * len(train))))]
        train_batch = ChainBatch(train, n)
        val = splits.open("validation").instances
        val_batch = ChainBatch(val, n)
        val_gold = gold_tags(val, corpus.tags)
        chosen = {}
        for loss in config.losses:
            candidates = []
            for spec in loss_grid(loss, config.alpha_grid):
                for lam in config.lambda_grid:
                    model, result = train_chain(spec, train_batch, n, t, config.optim(lam))
                    f1 = chunk_f1(decode(model, val_batch, corpus.tags), val_gold).f1
                    candidates.append(Candidate(spec, lam, f1, result, model))
            chosen[loss] = select(candidates, higher_is_better=True)
        splits.finish_selection()
        test = splits.open("test").instances
        test_batch = ChainBatch(test, n)
        test_gold = gold_tags(test, corpus.tags)
        for loss, c in chosen.items():
            ev = chunk_f1(decode(c.extra, test_batch, corpus.tags), test_gold)
            metrics.append((portion, loss, ev.accuracy, ev.precision, ev.recall, ev.f1))
            selection.append((portion, loss, c.spec.alpha, c.lam, c.score, _status(c.result)))
        logs[portion] = splits.access_log
        audit_access(splits.access_log)
        if "log" in chosen and portion == max(config.portions):
            profiled_model = (chosen["log"].extra, train, test)
    # dominance profiles: generator posterior on the test split, and the
    # selected log-loss model on its training data and the test split
    profiles = [("true", "test", dominance_profile(corpus.true_model, test_c.instances))]
    if profiled_model is not None:
        model, train, test = profiled_model
        profiles.append(("log", "train", dominance_profile(model, train)))
        profiles.append(("log", "test", dominance_profile(model, test)))
    for source, split, prof in profiles:
        dominance.extend(_sorted_profile(source, split, prof))
        dom_summary.append((source, split, len(prof.gold_prob), prof.nondominant_count, prof.nondominant_fraction))
    metrics.sort(key=lambda r: (r[0], LOSSES.index(r[1])))
    selection.sort(key=lambda r: (r[0], LOSSES.index(r[1])))
    return ChunkingResult(metrics, selection, dominance, dom_summary, logs)


def run_chunking(config: ExperimentConfig, write: bool = True) -> dict[int, ChunkingResult]:
    out = {}
    root = Path(config.output_dir)
    for seed in config.seeds:
        res = run_chunking_seed(config, seed)
        if write:
            res.paths.append(write_csv(root / f"chunking_seed{seed}.csv",
                                       ("portion", "loss", "accuracy", "precision", "recall", "f1"), res.metrics))
            res.paths.append(write_csv(root / f"chunking_selection_seed{seed}.csv",
                                       ("portion", "loss", "alpha", "lambda", "validation_f1", "status"),
                                       res.selection))
            res.paths.append(write_csv(root / f"dominance_seed{seed}.csv",
                                       ("source", "split", "rank", "gold_prob", "viterbi_prob"), res.dominance))
            res.paths.append(write_csv(root / f"dominance_summary_seed{seed}.csv",
                                       ("source", "split", "sentences", "nondominant", "fraction"),
                                       res.dominance_summary))
        out[seed] = res
    return out


def run(config: ExperimentConfig, write: bool = True):
    if config.experiment == "nondominant-sweep":
        return run_nondominant_sweep(config, write)
    if config.experiment == "mixed-grid":
        return run_mixed_grid(config, write)
    return run_chunking(config, write)
