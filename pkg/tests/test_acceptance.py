"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the per-criterion lines
are repeated in the terminal summary. Criterion 12 needs MNIST IDX files in
``$FEDVECA_MNIST_DIR`` (default ``data/mnist``) and is skipped otherwise.
"""
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from conftest import small_config
from fedveca import model as M
from fedveca.baselines import compare, load_data, run_federated
from fedveca.client import estimate_beta, local_train, round_stream
from fedveca.config import from_dict
from fedveca.data import gen_synthetic
from fedveca.fed_core import ClientReport, aggregate_fedavg, aggregate_fednova, weights
from fedveca.metrics import metrics_csv
from fedveca.numerics import RngStream
from fedveca.server import predict_tau, tau_bound
from test_client import quadratic_trajectory
from test_model import gradient_probe_errors
from test_server import TAU_TABLE

RESULTS = []
CASE3_SEEDS = list(range(10))
MAX_TAU = 50


def verdict(n, ok, detail, soft=False, skipped=False):
    status = "SKIP" if skipped else "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
    line = f"criterion {n:>2}: {status:<9} {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def csv_of(results):
    recs = []
    for r in results:
        recs += r.records
    return metrics_csv(recs, len(results[0].shard_sizes))


@pytest.fixture(scope="module")
def case1_run():
    t0 = time.perf_counter()
    cmp = compare(from_dict({"partition": "case1"}), 0)
    return cmp, time.perf_counter() - t0


@pytest.fixture(scope="module")
def case3_runs():
    cfg = from_dict({"partition": "case3"})
    return [compare(cfg, s) for s in CASE3_SEEDS]


def all_fedveca(case1_run, case3_runs):
    return [case1_run[0].fedveca] + [c.fedveca for c in case3_runs]


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    errs = {
        "squared_svm": max(gradient_probe_errors(M.ModelSpec(M.SQUARED_SVM, 6), 100, seed=101)),
        "logistic": max(gradient_probe_errors(M.ModelSpec(M.LOGISTIC, 6, num_classes=4), 100, seed=102)),
    }
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-5 and dt < 5
    assert verdict(1, ok, f"max rel err svm={errs['squared_svm']:.2e} logistic={errs['logistic']:.2e}, {dt:.2f}s")


def test_criterion_02_aggregator_identity():
    spec = M.ModelSpec(M.SQUARED_SVM, 5)
    worst = 0.0
    for r in range(20):
        rng = RngStream(r)
        tau = int(rng.integers(10, 1)[0]) + 1
        sizes = [int(s) + 20 for s in rng.integers(80, 3)]
        shards = [gen_synthetic(n, 5, 2, 2.0, 1000 * r + i) for i, n in enumerate(sizes)]
        w = rng.normal(spec.dim)
        reps, sums = [], []
        for i, shard in enumerate(shards):
            traj, G = local_train(w, tau, spec, shard, 0.01, 8, round_stream(r, 0, i))
            sums.append(traj.grad_sum())
            reps.append(ClientReport(i, tau, G, sums[-1], np.zeros(spec.dim), 0.0))
        p = weights(sizes)
        nova = aggregate_fednova(reps, p, 0.01, w)[0]
        avg = aggregate_fedavg(sums, [tau] * 3, p, 0.01, w)
        worst = max(worst, float(np.max(np.abs(nova - avg))))
    assert verdict(2, worst <= 1e-12, f"max |FedNova - FedAvg| = {worst:.1e} over 20 rounds")


def test_criterion_03_single_client_reduction():
    cfg = small_config(n_clients=1, rounds=10)
    data = load_data(cfg, 3)
    res = run_federated("fedveca", cfg, 3, data=data, keep_weights=True)
    exact = 0
    for k, tau in enumerate(res.ledger.tau_log):
        traj, _ = local_train(res.w_trace[k], tau[0], data.spec, data.shards[0], cfg.eta, cfg.batch_size,
                              round_stream(3, k, 0))
        exact += np.array_equal(traj.params[-1], res.w_trace[k + 1])
    assert verdict(3, exact == 10, f"{exact}/10 rounds bit-identical to the local endpoint")


def test_criterion_04_tau_controller_oracle():
    hits = sum(predict_tau(A, a, m) == want for A, a, m, want in TAU_TABLE)
    derived = predict_tau([2.0, 4.0], 0.95, 50) == [20, 2]
    assert verdict(4, hits == len(TAU_TABLE) == 25 and derived, f"{hits}/{len(TAU_TABLE)} table cases exact, [2,4]@0.95 -> [20,2]: {derived}")


def test_criterion_05_tau_within_convergence_bound(case1_run, case3_runs):
    checked, bad = 0, []
    for res in all_fedveca(case1_run, case3_runs):
        for rec, raw in zip(res.records, res.tau_raw_trace):
            if raw is None:
                continue
            for i, (t, b) in enumerate(zip(raw, tau_bound(rec.A, 0.95))):
                checked += 1
                if t is not None and not t <= b:
                    bad.append((res.seed, rec.round, i))
        for k, row in enumerate(res.ledger.tau_log):
            checked += len(row)
            bad += [(res.seed, k, i) for i, t in enumerate(row) if not 2 <= t <= MAX_TAU]
    assert verdict(5, not bad, f"{checked} tau values checked over 11 runs, {len(bad)} violations")


def test_criterion_06_case1_convergence(case1_run):
    cmp, dt = case1_run
    ref = cmp.centralized.records[-1].loss
    gaps = {r.algo: r.records[-1].loss / ref - 1 for r in (cmp.fedveca, cmp.fedavg, cmp.fednova)}
    ok = all(abs(g) <= 0.10 for g in gaps.values()) and dt < 120
    detail = ", ".join(f"{a} {g:+.1%}" for a, g in gaps.items())
    assert verdict(6, ok, f"final loss vs centralized {ref:.3e}: {detail}; {dt:.1f}s")


def first_reach(records, target, K):
    for r in records:
        if r.loss <= target:
            return r.round
    return K  # never reached within the run


def test_criterion_07_case3_ordering(case3_runs):
    K = case3_runs[0].fedveca.records[-1].round + 1
    idx = {"fedveca": [], "fedavg": [], "fednova": []}
    final = {a: [] for a in idx}
    for cmp in case3_runs:
        ref = cmp.centralized.records[-1].loss
        for res in (cmp.fedveca, cmp.fedavg, cmp.fednova):
            idx[res.algo].append(first_reach(res.records, 1.05 * ref, K))
            final[res.algo].append(res.records[-1].loss / ref - 1)
    mean = {a: sum(v) / len(v) for a, v in idx.items()}
    reached = {a: sum(i < K for i in v) for a, v in idx.items()}
    gap = mean["fedveca"] - min(mean["fedavg"], mean["fednova"])
    detail = (f"mean first-reach round fedveca={mean['fedveca']:.1f} fedavg={mean['fedavg']:.1f} "
              f"fednova={mean['fednova']:.1f} (runs reaching 5% band: {reached}, unreached counted as {K}"
              f"{'; ordering vacuous' if not any(reached.values()) else ''}); mean final gap "
              + " ".join(f"{a} {np.mean(v):+.0%}" for a, v in final.items()))
    if gap <= 0:
        assert verdict(7, True, detail)
    elif gap <= 5:
        verdict(7, False, detail, soft=True)
        warnings.warn(f"criterion 7 soft-fail: FedVeca {gap:.1f} rounds behind")
    else:
        assert verdict(7, False, detail)


def test_criterion_08_premise_monitor(case3_runs):
    fracs = []
    for cmp in case3_runs:
        vals = [r.eta_tau_L for r in cmp.fedveca.records if r.round >= 2]
        fracs.append(sum(v >= 1 for v in vals) / len(vals))
    rows = csv_of([case3_runs[0].fedveca]).splitlines()
    col = rows[0].split(",").index("eta_tau_L")
    emitted = all(row.split(",")[col] != "" for row in rows[2:])
    ok = min(fracs) >= 0.80 and emitted
    assert verdict(8, ok, f"rounds with eta*tau_k*L >= 1: min {min(fracs):.0%}, mean {np.mean(fracs):.0%} over {len(fracs)} runs")


def test_criterion_09_estimator_sanity(case1_run, case3_runs):
    problems = 0
    for res in all_fedveca(case1_run, case3_runs):
        for rec in res.records[1:]:
            vals = list(rec.beta) + list(rec.delta) + list(rec.A)
            problems += sum(not (math.isfinite(v) and v >= 0) for v in vals)
        Ls = [L for L in res.L_trace if L is not None]
        problems += sum(not (math.isfinite(L) and L >= 0) for L in Ls)
        problems += sum(b < a for a, b in zip(Ls, Ls[1:]))
    traj = quadratic_trajectory([0.4, 1.3, -0.7], 1e-4, 10)
    beta = estimate_beta(traj, traj.params[0])
    ok = problems == 0 and abs(beta - 1) <= 1e-6
    assert verdict(9, ok, f"{problems} bad estimator values / L decreases; quadratic beta = {beta:.9f}")


def test_criterion_10_transport_equivalence():
    cfg = from_dict({"rounds": 20, "n_clients": 3})
    inproc = csv_of([run_federated("fedveca", cfg, 7, transport="inproc")])
    sock = csv_of([run_federated("fedveca", cfg, 7, transport="socket:0")])
    assert verdict(10, inproc == sock, f"socket vs in-process CSV byte-identical: {inproc == sock} ({len(sock)} bytes)")


def test_criterion_11_determinism(case1_run, case3_runs):
    again1 = compare(from_dict({"partition": "case1"}), 0)
    same = [csv_of(case1_run[0].results()) == csv_of(again1.results())]
    cfg3 = from_dict({"partition": "case3"})
    for cmp in case3_runs:
        same.append(csv_of(cmp.results()) == csv_of(compare(cfg3, cmp.seed).results()))
    assert verdict(11, all(same), f"{sum(same)}/{len(same)} repeated acceptance runs byte-identical")


MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_paths():
    root = Path(os.environ.get("FEDVECA_MNIST_DIR", "data/mnist"))
    found = []
    for name in MNIST_FILES:
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                found.append(str(cand))
                break
        else:
            return None
    return found


def test_criterion_12_mnist_optional():
    paths = mnist_paths()
    if paths is None:
        verdict(12, True, "MNIST IDX files not found", skipped=True)
        pytest.skip("MNIST IDX files not found")
    cfg = from_dict({"dataset": dict(zip(("source", "train_images", "train_labels", "test_images", "test_labels"),
                                         ["idx"] + paths)), "partition": "case1"})
    cmp = compare(cfg, 0)
    ref = cmp.centralized.records[-1].accuracy
    gaps = {r.algo: r.records[-1].accuracy - ref for r in (cmp.fedveca, cmp.fedavg, cmp.fednova)}
    ok = abs(gaps["fedveca"]) <= 0.02
    detail = ", ".join(f"{a} {g * 100:+.2f}pp" for a, g in gaps.items())
    assert verdict(12, ok, f"accuracy vs centralized {ref:.4f}: {detail}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
