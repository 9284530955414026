"""Acceptance criteria at full size, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the terminal summary under "acceptance criteria".
"""

import itertools
import math
import time

import numpy as np

from conftest import ACCEPTANCE_LINES, finite_difference, relative_error
from hybridloss import experiments as ex
from hybridloss.chain import (ChainBatch, ChainInstance, ChainModel, best_competitor, chain_objective,
                              forward_backward, viterbi)
from hybridloss.cli import main as cli_main
from hybridloss.consistency import alpha_condition, is_aligned, simplex_risk_minimizer
from hybridloss.losses import LossSpec
from hybridloss.model import FeatureVector, FlatDataset
from hybridloss.optim import OptimConfig, minimize, regularized_batch_objective, train_flat
from hybridloss.pacbayes import BoundInputs, appendix_bound_rhs, complexity_term

SPECS = (LossSpec.log(), LossSpec.hinge(), LossSpec.hybrid(0.5))


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_nondominant_sweep(tmp_path):
    start = time.perf_counter()
    cfg = ex.ExperimentConfig("nondominant-sweep", output_dir=str(tmp_path))
    res = ex.run_nondominant_sweep(cfg)
    elapsed = time.perf_counter() - start
    err = {(r[0], r[1]): r[3] for r in res.rows}
    ks = list(range(3, 11))
    flat = all(abs(err[k, loss] - 0.54) <= 0.02 for k in ks for loss in ("log", "hybrid"))
    hinge = [err[k, "hinge"] for k in ks]
    rising = all(b >= a for a, b in zip(hinge, hinge[1:])) and hinge[-1] - hinge[0] >= 0.05
    detail = (f"log/hybrid in [{min(err[k, l] for k in ks for l in ('log', 'hybrid')):.4f}, "
              f"{max(err[k, l] for k in ks for l in ('log', 'hybrid')):.4f}], "
              f"hinge {hinge[0]:.4f}->{hinge[-1]:.4f}, {elapsed:.1f}s")
    report(1, flat and rising and elapsed <= 120, detail)


# --- 2 ----------------------------------------------------------------------

def _random_q(rng, nondominant: bool):
    while True:
        k = int(rng.integers(3, 6))
        q = rng.dirichlet(np.ones(k))
        if not nondominant or q.max() < 0.5:
            return q


def test_criterion_2_oracle_alignment():
    start = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(2024))
    aligned = 0
    for _ in range(200):
        q = _random_q(rng, nondominant=False)
        alpha = min(alpha_condition(q).alpha_threshold + 0.05, 1.0)
        res = simplex_risk_minimizer(LossSpec("hybrid", alpha), q, resolution=100)
        aligned += is_aligned(res.minimizer, q)
    misaligned = 0
    for _ in range(100):
        q = _random_q(rng, nondominant=True)
        res = simplex_risk_minimizer(LossSpec.hinge(), q, resolution=100)
        misaligned += not is_aligned(res.minimizer, q)
    elapsed = time.perf_counter() - start
    report(2, aligned == 200 and misaligned >= 50 and elapsed <= 300,
           f"hybrid aligned {aligned}/200, hinge misaligned {misaligned}/100, {elapsed:.1f}s")


# --- 3 ----------------------------------------------------------------------

def _near_flat_kink(spec, scores, gold):
    if spec.alpha == 1.0:
        return False
    s = np.sort(scores, axis=1)
    rival = np.where(np.argmax(scores, axis=1) == gold, s[:, -2], s[:, -1])
    margin = scores[np.arange(len(gold)), gold] - rival
    return bool(np.any(np.abs(1 - margin) < 1e-3) or np.any(s[:, -1] - s[:, -2] < 1e-3))


def _near_chain_kink(spec, model, insts):
    if spec.alpha == 1.0:
        return False
    for inst in insts:
        scores = {}
        for p in itertools.product(range(model.tag_count), repeat=inst.length):
            scores[p] = sum(float(f.to_dense() @ model.emission[:, y]) for f, y in zip(inst.observations, p)) \
                + model.start[p[0]] + model.end[p[-1]] \
                + sum(model.transition[a, b] for a, b in zip(p, p[1:]))
        gold = scores[inst.gold_tags]
        others = sorted(v for p, v in scores.items() if p != inst.gold_tags)
        if abs(1 - (gold - others[-1])) < 1e-3 or (len(others) > 1 and others[-1] - others[-2] < 1e-3):
            return True
    return False


def test_criterion_3_gradients():
    rng = np.random.Generator(np.random.PCG64(3))
    worst = 0.0
    for spec in SPECS:
        done = 0
        while done < 50:
            k, d, m = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
            data = FlatDataset.from_observations(rng.normal(size=(m, d)), rng.integers(0, k, m), k)
            w = rng.normal(size=data.dimension)
            if _near_flat_kink(spec, data.scores(w), data.gold):
                continue
            f = regularized_batch_objective(spec, data)
            worst = max(worst, relative_error(f(w)[1], finite_difference(lambda v: f(v)[0], w, 1e-5)))
            done += 1
        done = 0
        while done < 50:
            n, t = int(rng.integers(1, 4)), int(rng.integers(2, 4))
            insts = []
            for _ in range(int(rng.integers(1, 3))):
                length = int(rng.integers(1, 4))
                obs = tuple(FeatureVector.from_dense(rng.normal(size=n)) for _ in range(length))
                insts.append(ChainInstance(obs, tuple(int(v) for v in rng.integers(0, t, length))))
            f = chain_objective(spec, ChainBatch(insts, n), n, t)
            w = rng.normal(size=f.dimension)
            if _near_chain_kink(spec, ChainModel.unpack(w, n, t), insts):
                continue
            worst = max(worst, relative_error(f(w)[1], finite_difference(lambda v: f(v)[0], w, 1e-5)))
            done += 1
    report(3, worst <= 1e-5, f"worst relative error {worst:.2e} over 300 instances")


# --- 4 ----------------------------------------------------------------------

def test_criterion_4_chain_inference():
    rng = np.random.Generator(np.random.PCG64(4))
    worst = 0.0
    for _ in range(100):
        t, length, n = int(rng.integers(2, 5)), int(rng.integers(1, 7)), 3
        obs = tuple(FeatureVector.from_dense(rng.normal(size=n)) for _ in range(length))
        inst = ChainInstance(obs, tuple(int(v) for v in rng.integers(0, t, length)))
        model = ChainModel.random(n, t, rng, scale=1.5)
        paths = list(itertools.product(range(t), repeat=length))
        em = np.array([f.to_dense() for f in obs]) @ model.emission
        scores = np.array([model.start[p[0]] + model.end[p[-1]] + sum(em[j, y] for j, y in enumerate(p))
                           + sum(model.transition[a, b] for a, b in zip(p, p[1:])) for p in paths])
        log_z = np.logaddexp.reduce(scores)
        probs = np.exp(scores - log_z)
        node = np.zeros((length, t))
        edge = np.zeros((length - 1, t, t))
        for p, pr in zip(paths, probs):
            for j, y in enumerate(p):
                node[j, y] += pr
                if j:
                    edge[j - 1, p[j - 1], y] += pr
        post = forward_backward(model, inst)
        _, vscore = viterbi(model, inst)
        _, cscore = best_competitor(model, inst, inst.gold_tags)
        rival = max(s for p, s in zip(paths, scores) if p != inst.gold_tags)
        worst = max(worst, abs(post.log_partition - log_z), float(np.max(np.abs(post.node_marginals - node))),
                    float(np.max(np.abs(post.edge_marginals - edge))) if length > 1 else 0.0,
                    abs(vscore - scores.max()), abs(cscore - rival))
    report(4, worst <= 1e-8, f"worst absolute error {worst:.2e} over 100 models")


# --- 5 ----------------------------------------------------------------------

def test_criterion_5_mixed_grid(tmp_path):
    start = time.perf_counter()
    res = ex.run_mixed_grid(ex.ExperimentConfig("mixed-grid", output_dir=str(tmp_path)))
    elapsed = time.perf_counter() - start
    summary = {pair: (w, l) for pair, w, l in res.summary}
    cells = len({(r[0], r[1]) for r in res.rows})
    vs_hinge, vs_log = summary["hybrid_vs_hinge"], summary["hybrid_vs_log"]
    ok = cells == 60 and vs_hinge[0] > vs_hinge[1] and vs_log[0] > vs_log[1] and elapsed <= 1800
    report(5, ok, f"{cells} datasets, hybrid vs hinge {vs_hinge[0]}/{vs_hinge[1]}, "
                  f"hybrid vs log {vs_log[0]}/{vs_log[1]}, {elapsed:.0f}s")


# --- 6 ----------------------------------------------------------------------

def test_criterion_6_chunking(tmp_path):
    start = time.perf_counter()
    res = ex.run_chunking(ex.ExperimentConfig("chunking", seeds=(0, 1, 2), output_dir=str(tmp_path)))
    elapsed = time.perf_counter() - start
    fractions, gaps = [], []
    for r in res.values():
        fractions += [row[4] for row in r.dominance_summary if row[:2] == ("true", "test")]
        f1 = {(row[0], row[1]): row[5] for row in r.metrics}
        gaps += [f1[p, "hybrid"] - f1[p, "hinge"] for p in (0.1, 1.0)]
    ok = min(fractions) >= 0.2 and min(gaps) >= -0.002
    report(6, ok, f"true-model non-dominant fraction min {min(fractions):.3f}, "
                  f"hybrid - hinge F1 min {min(gaps):+.4f} over 3 seeds x 2 portions, {elapsed:.0f}s")


# --- 7 ----------------------------------------------------------------------

def test_criterion_7_pac_bayes():
    m, delta = 100, 0.1
    want = math.sqrt((math.log(m + 1) + math.log(1 / (delta * (1 - math.exp(-2))))) / (2 * m))
    got = appendix_bound_rhs(BoundInputs(0.0, m, 2, 0.0, 1.0, delta)).rhs
    hand_ok = abs(got - want) <= 1e-12
    ms, deltas, alphas = [10, 30, 100, 300, 1000], [0.5, 0.2, 0.1, 0.05, 0.01], [0.0, 0.2, 0.4, 0.6, 0.8]
    violations = 0
    for i, j, a in itertools.product(range(5), range(5), range(5)):
        c = complexity_term(1.0, ms[i], alphas[a], deltas[j])
        if i < 4 and not complexity_term(1.0, ms[i + 1], alphas[a], deltas[j]) < c:
            violations += 1
        if j < 4 and not complexity_term(1.0, ms[i], alphas[a], deltas[j + 1]) > c:
            violations += 1
        if a < 4 and not complexity_term(1.0, ms[i], alphas[a + 1], deltas[j]) > c:
            violations += 1
    report(7, hand_ok and violations == 0,
           f"hand value error {abs(got - want):.1e}, {violations} monotonicity violations on 5x5x5")


# --- 8 ----------------------------------------------------------------------

def _cli(*argv):
    try:
        return cli_main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path):
    # reduced grids: determinism does not depend on grid size
    commands = [
        ("synth", "nondominant", "--seed", 5, "--labels", 4, "--samples", 500),
        ("synth", "mixed", "--seed", 5, "--samples", 60, "--heldout", 100),
        ("synth", "chunk", "--seed", 5, "--sentences", 40),
        ("sweep-nondominant", "--seed", 5, "--label-counts", "3,6", "--samples", 2000),
        ("sweep-mixed", "--seed", 5, "--rhos", "0.2,0.8", "--sizes", "30,100", "--alphas", "0.3,0.7",
         "--lambdas", "0.001,0.1", "--max-iterations", 60),
        ("chunking", "--seed", 5, 6, "--sentences", 80, "--alphas", "0.5", "--lambdas", "0.01,0.1",
         "--max-iterations", 40),
        ("consistency-check", "--seed", 5, "--samples", 5),
    ]
    runs = []
    for name in ("first", "second"):
        root = tmp_path / name
        root.mkdir()
        codes = []
        for cmd in commands:
            out = root / cmd[0] / (cmd[1] if cmd[0] == "synth" else "")
            flag = "--out-dir" if cmd[0] in ("sweep-nondominant", "sweep-mixed", "chunking") else "--out"
            if cmd[0] == "consistency-check":
                out = root / "consistency.csv"
            codes.append(_cli(*cmd, flag, out))
        data = root / "synth" / "mixed"
        codes.append(_cli("train", "--data", data / "train.csv", "--out", root / "model.txt",
                          "--max-iterations", 60))
        codes.append(_cli("eval", "--model", root / "model.txt", "--data", data / "test.csv",
                          "--out", root / "eval.csv"))
        codes.append(_cli("bound", "--model", root / "model.txt", "--data", data / "train.csv",
                          "--seed", 5, "--labels", 5, "--out", root / "bound.csv"))
        runs.append((codes, _snapshot(root)))
    (codes_a, files_a), (codes_b, files_b) = runs
    csvs = [name for name in files_a if name.endswith(".csv")]
    same = files_a.keys() == files_b.keys() and all(files_a[n] == files_b[n] for n in files_a)
    ok = same and all(c == 0 for c in codes_a + codes_b) and len(csvs) >= 15
    report(8, ok, f"{len(commands) + 3} commands, {len(csvs)} CSV files, byte-identical: {same}")


# --- 9 ----------------------------------------------------------------------

def test_criterion_9_optimizer():
    a = np.array([1.0, -2.0, 3.0, 0.5])
    quad = minimize(lambda w: (float((w - a) @ (w - a)), 2 * (w - a)), OptimConfig(max_iterations=50), np.zeros(4))
    quad_ok = quad.iterations <= 50 and float(np.max(np.abs(quad.weights - a))) <= 1e-8

    def rosenbrock(w):
        x, y = w
        return ((1 - x) ** 2 + 100 * (y - x * x) ** 2,
                np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]))

    rosen = minimize(rosenbrock, OptimConfig(max_iterations=500, gradient_tolerance=1e-9), np.array([-1.2, 1.0]))
    rosen_ok = float(np.max(np.abs(rosen.weights - 1.0))) <= 1e-6
    rng = np.random.Generator(np.random.PCG64(9))
    worst = 0.0
    config = ex.ExperimentConfig("mixed-grid").optim(1e-2)
    for _ in range(10):
        k, d, m = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(20, 60))
        data = FlatDataset.from_observations(rng.normal(size=(m, d)), rng.integers(0, k, m), k)
        for spec in SPECS:
            values = [train_flat(spec, data, config, rng.normal(size=data.dimension)).final_value
                      for _ in range(2)]
            worst = max(worst, abs(values[0] - values[1]))
    report(9, quad_ok and rosen_ok and worst <= 1e-5,
           f"quadratic {quad_ok}, Rosenbrock {rosen_ok}, worst two-start gap {worst:.1e} on 10 datasets x 3 losses")
