"""Command line entry point.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (bad input file, numerical failure and so on).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .artifact import ArtifactError, ModelArtifact, fingerprint, load_model, save_model
from .chain import ChainBatch
from .conll import ConllFormatError, read_conll, write_conll
from .consistency import alpha_condition, dominance_profile, is_aligned, simplex_risk_minimizer
from .losses import LossSpec
from .metrics import chunk_f1
from .model import FlatDataset
from .optim import NonFiniteError, train_flat
from .pacbayes import BoundInputs, appendix_bound_rhs, empirical_margin_error
from .synthdata import (MixedSpec, NonDominantSpec, SynthChunkSpec, generate_chunk_corpus,
                        generate_mixed, generate_nondominant)

log = logging.getLogger("hybridloss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.split(",") if v)


# --- flat CSV data ------------------------------------------------------------

def write_flat_csv(data: FlatDataset, path) -> None:
    """``label,x0,...`` rows; only block-structured datasets have an x to write."""
    if data.blocks is None:
        raise ValueError("dataset has no per-observation features to write")
    d = data.blocks.shape[1]
    reps = np.repeat(np.arange(len(data)), data.counts.astype(np.int64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"x{j}" for j in range(d)])
        for i in reps:
            w.writerow([int(data.gold[i])] + [repr(float(v)) for v in data.blocks[i]])


def read_flat_csv(path, label_count: int | None = None) -> FlatDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "label":
        raise ValueError(f"{path}: expected a header starting with 'label'")
    width = len(rows[0])
    labels, x = [], []
    for number, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ValueError(f"{path}:{number}: expected {width} columns, found {len(row)}")
        try:
            labels.append(int(row[0]))
            x.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{number}: {exc}") from None
    if not labels:
        raise ValueError(f"{path}: no data rows")
    k = label_count if label_count is not None else max(labels) + 1
    return FlatDataset.from_observations(np.array(x), np.array(labels), max(k, 2))


def _is_chain(path) -> bool:
    return Path(path).suffix.lower() == ".conll"


def _load_data(path, label_count=None):
    if _is_chain(path):
        return read_conll(path)
    return read_flat_csv(path, label_count)


def _emit(header, rows, out):
    if out:
        ex.write_csv(Path(out), header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([ex.format_cell(v) for v in r])


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "nondominant":
        gen = generate_nondominant(NonDominantSpec(args.labels, args.samples, args.seed, args.top_prob))
        write_flat_csv(gen.data, out / "train.csv")
    elif args.kind == "mixed":
        gen = generate_mixed(MixedSpec(args.rho, args.samples, args.seed, heldout_size=args.heldout))
        for name in ("train", "validation", "test"):
            write_flat_csv(getattr(gen, name).data, out / f"{name}.csv")
    else:
        corpus = generate_chunk_corpus(SynthChunkSpec(
            sentence_count=args.sentences, ambiguity_rate=args.ambiguity_rate, seed=args.seed))
        write_conll(corpus, out / "corpus.conll")
    print(out)


def cmd_train(args) -> None:
    spec = LossSpec(args.loss, args.alpha if args.loss == "hybrid" else 0.5)
    chain = _is_chain(args.data)
    # pipeline optimizer settings, exact stage uncapped
    config = ex.ExperimentConfig("chunking", max_iterations=args.max_iterations,
                                 stall_window=args.stall_window).optim(args.lam)
    data = _load_data(args.data, args.label_count)
    settings = {"lambda": args.lam, "max_iterations": args.max_iterations,
                "stall_window": args.stall_window, "data": Path(args.data).name}
    if chain:
        if not data.instances:
            raise ValueError("training data is empty")
        n, t = len(data.vocabulary), len(data.tags)
        model, result = ex.train_chain(spec, data.instances, n, t, config)
        shape = {"feature_count": n, "tag_count": t, "tags": list(data.tags)}
        art = ModelArtifact(model.pack(), "chain", spec, shape, settings, fingerprint(data.instances))
    else:
        result = train_flat(spec, data.compress(), config)
        shape = {"dimension": data.dimension, "label_count": data.label_count}
        art = ModelArtifact(result.weights, "flat", spec, shape, settings, fingerprint(data))
    save_model(art, args.out)
    log.info("objective %.6g after %d iterations (%s)", result.final_value, result.iterations,
             "converged" if result.converged else "not converged")
    print(args.out)


def _flat_eval(art: ModelArtifact, data: FlatDataset) -> tuple[tuple, list]:
    if data.dimension != art.shape["dimension"]:
        raise ValueError(f"data dimension {data.dimension} does not match model {art.shape['dimension']}")
    pred = data.predict(art.weights)
    acc = float(np.mean(pred == data.gold))
    return ("examples", "accuracy", "error"), [(len(data), acc, 1.0 - acc)]


def cmd_eval(args) -> None:
    art = load_model(args.model)
    if args.train_data:
        train = _load_data(args.train_data, art.shape.get("label_count"))
        art.verify(train.instances if _is_chain(args.train_data) else train)
    if art.kind == "flat":
        header, rows = _flat_eval(art, read_flat_csv(args.data, art.shape["label_count"]))
    else:
        corpus = read_conll(args.data)
        if corpus.tags != art.shape["tags"]:
            raise ValueError("tag set of the data differs from the model's")
        model = art.chain_model()
        batch = ChainBatch(corpus.instances, model.feature_count)
        ev = chunk_f1(ex.decode(model, batch, corpus.tags), ex.gold_tags(corpus.instances, corpus.tags))
        header = ("sentences", "accuracy", "precision", "recall", "f1")
        rows = [(len(corpus.instances), ev.accuracy, ev.precision, ev.recall, ev.f1)]
    _emit(header, rows, args.out)


def _experiment_config(args, experiment: str) -> ex.ExperimentConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    values["experiment"] = experiment
    values["seeds"] = tuple(args.seed)
    for flag, name in (("losses", "losses"), ("alphas", "alpha_grid"), ("lambdas", "lambda_grid"),
                       ("out_dir", "output_dir"), ("max_iterations", "max_iterations"),
                       ("stall_window", "stall_window"), ("label_counts", "label_counts"),
                       ("samples", "sample_count"), ("top_prob", "top_prob"),
                       ("rhos", "rho_grid"), ("sizes", "size_grid"), ("sentences", "sentence_count"),
                       ("ambiguity_rate", "ambiguity_rate"), ("portions", "portions")):
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    config = ex.ExperimentConfig.from_dict(values)
    Path(config.output_dir).mkdir(parents=True, exist_ok=True)
    return config


def _report_paths(paths) -> None:
    for p in paths:
        print(p)


def cmd_sweep_nondominant(args) -> None:
    _report_paths(ex.run_nondominant_sweep(_experiment_config(args, "nondominant-sweep")).paths)


def cmd_sweep_mixed(args) -> None:
    config = _experiment_config(args, "mixed-grid")
    _report_paths(ex.run_mixed_grid(config, progress=lambda s: log.info("cell %s done", s)).paths)


def cmd_chunking(args) -> None:
    for res in ex.run_chunking(_experiment_config(args, "chunking")).values():
        _report_paths(res.paths)


def cmd_consistency_check(args) -> None:
    if args.q is not None:
        qs = [np.array(args.q)]
    else:
        if args.seed is None:
            raise UsageError("--seed is required unless --q is given")
        rng = np.random.Generator(np.random.PCG64(args.seed))
        qs = [rng.dirichlet(np.ones(args.labels)) for _ in range(args.samples)]
    rows = []
    for i, q in enumerate(qs):
        report = alpha_condition(q)
        alpha = args.alpha if args.alpha is not None else min(report.alpha_threshold + args.margin, 1.0)
        res = simplex_risk_minimizer(LossSpec("hybrid", alpha), q, args.resolution)
        rows.append((i, " ".join(repr(float(v)) for v in q), report.dominant,
                     report.raw_threshold, alpha, is_aligned(res.minimizer, q)))
    _emit(("case", "q", "dominant", "threshold", "alpha", "aligned"), rows, args.out)


def cmd_dominance(args) -> None:
    art = load_model(args.model)
    if art.kind != "chain":
        raise ValueError("dominance profiles need a chain model")
    corpus = read_conll(args.data)
    prof = dominance_profile(art.chain_model(), corpus.instances)
    gold = np.sort(prof.gold_prob)
    vit = np.sort(prof.viterbi_prob)
    rows = [(i, float(g), float(v)) for i, (g, v) in enumerate(zip(gold, vit))]
    _emit(("rank", "gold_prob", "viterbi_prob"), rows, args.out)
    log.info("non-dominant fraction %.4f", prof.nondominant_fraction)


def cmd_bound(args) -> None:
    if args.model:
        if args.seed is None:
            raise UsageError("--seed is required when the bound is evaluated for a model")
        art = load_model(args.model)
        data = _load_data(args.data, art.shape.get("label_count"))
        if art.kind == "chain":
            model, dataset, k = art.chain_model(), data.instances, art.shape["tag_count"]
        else:
            model, dataset, k = art.weights, data, art.shape["label_count"]
        err = empirical_margin_error(model, dataset, args.gamma, args.posterior_samples, args.seed)
        norm_sq = float(art.weights @ art.weights)
        m = len(dataset)
        losses = [err]
    else:
        if args.weight_norm_sq is None or args.samples is None:
            raise UsageError("give --model and --data, or --weight-norm-sq and --samples")
        norm_sq, m, k, losses = args.weight_norm_sq, args.samples, args.labels, []
    res = appendix_bound_rhs(BoundInputs(norm_sq, m, k, args.alpha, args.gamma, args.delta, losses))
    _emit(("rhs", "empirical", "complexity", "kl", "log_a"),
          [(res.rhs, res.empirical_term, res.complexity_term, res.kl, res.log_a)], args.out)


# --- parser -------------------------------------------------------------------

def _experiment_flags(p, extra) -> None:
    p.add_argument("--seed", type=int, nargs="+", required=True, help="one or more seeds")
    p.add_argument("--config", help="JSON file of ExperimentConfig fields; flags override it")
    p.add_argument("--out-dir", help="directory for CSV output")
    p.add_argument("--losses", type=_names, help="comma-separated subset of log,hinge,hybrid")
    p.add_argument("--alphas", type=_floats, help="hybrid alpha grid")
    p.add_argument("--lambdas", type=_floats, help="regularization grid")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--stall-window", type=int)
    for name, kind, help_text in extra:
        p.add_argument(name, type=kind, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridloss", description="Hybrid log/hinge loss experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("kind", choices=("nondominant", "mixed", "chunk"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--labels", type=int, default=3, help="label count (nondominant)")
    p.add_argument("--samples", type=int, default=1000, help="training size (nondominant, mixed)")
    p.add_argument("--top-prob", type=float, default=0.46)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--heldout", type=int, default=1000, help="validation and test size (mixed)")
    p.add_argument("--sentences", type=int, default=1000)
    p.add_argument("--ambiguity-rate", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and save it")
    p.add_argument("--data", required=True, help=".csv (flat) or .conll (chain) training file")
    p.add_argument("--out", required=True, help="model file")
    p.add_argument("--loss", choices=ex.LOSSES, default="hybrid")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--max-iterations", type=int, default=500)
    p.add_argument("--stall-window", type=int, default=25)
    p.add_argument("--label-count", type=int, help="flat data; default max label + 1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", help="check the model's training-set fingerprint against this file")
    p.add_argument("--out", help="CSV file; default stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-nondominant", help="training error against label count")
    _experiment_flags(p, [("--label-counts", _ints, "label counts to sweep"),
                          ("--samples", int, "sample size per label count"),
                          ("--top-prob", float, "probability of the top label")])
    p.set_defaults(func=cmd_sweep_nondominant)

    p = sub.add_parser("sweep-mixed", help="test accuracy over the rho x m grid")
    _experiment_flags(p, [("--rhos", _floats, "non-dominant fractions"),
                          ("--sizes", _ints, "training sizes")])
    p.set_defaults(func=cmd_sweep_mixed)

    p = sub.add_parser("chunking", help="synthetic chunking pipeline")
    _experiment_flags(p, [("--sentences", int, "corpus size"),
                          ("--ambiguity-rate", float, "share of ambiguous tokens"),
                          ("--portions", _floats, "training portions")])
    p.set_defaults(func=cmd_chunking)

    p = sub.add_parser("consistency-check", help="oracle alignment of hybrid risk minimizers")
    p.add_argument("--q", type=_floats, help="one distribution, comma-separated")
    p.add_argument("--seed", type=int, help="required when sampling distributions")
    p.add_argument("--labels", type=int, default=3)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--alpha", type=float, help="fixed alpha; default threshold + margin")
    p.add_argument("--margin", type=float, default=0.05)
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_consistency_check)

    p = sub.add_parser("dominance", help="sorted gold and Viterbi probabilities under a chain model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help=".conll file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dominance)

    p = sub.add_parser("bound", help="PAC-Bayes right-hand side")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--seed", type=int, help="posterior sampling seed (with --model)")
    p.add_argument("--weight-norm-sq", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--labels", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--posterior-samples", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hybridloss: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ArtifactError, ConllFormatError, NonFiniteError, KeyError) as exc:
        print(f"hybridloss: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
