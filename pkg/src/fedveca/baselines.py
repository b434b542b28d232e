"""Experiment runners: FedVeca, budget-matched FedAvg/FedNova, and centralized SGD."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from . import model as M
from .client import ClientConfig, DivergenceError, LocalPlan, client_round, round_stream
from .config import ExperimentConfig
from .data import Dataset, gen_synthetic, partition, read_idx, sample_minibatch
from .fed_core import weights
from .metrics import RoundRecord, evaluate, mean_records
from .numerics import RngStream, axpy
from .server import Server, ServerConfig
from .transport import open_transport

log = logging.getLogger(__name__)

CENTRALIZED_STREAM = 0xCE57
TEST_STREAM = 0x7E57


@dataclass
class BudgetLedger:
    """Local step counts actually run by a FedVeca experiment, ``tau_log[k][i]``."""

    tau_log: List[List[int]] = field(default_factory=list)

    @property
    def tau_all(self) -> int:
        return int(sum(sum(row) for row in self.tau_log))


def budget_tau(ledger_or_total, K: int, B: int, D: int, D_i: Sequence[int]) -> List[int]:
    """Fixed per-client step counts with the same epoch budget: ``floor(E_avg * D_i / B)``, at least 1.

    ``E_avg = tau_all / K * B / D`` is evaluated exactly.
    """
    tau_all = ledger_or_total.tau_all if isinstance(ledger_or_total, BudgetLedger) else int(ledger_or_total)
    if K < 1 or B < 1 or D < 1 or any(d < 1 for d in D_i):
        raise ValueError("budget inputs must be positive")
    e_avg = Fraction(tau_all, K) * Fraction(B, D)
    return [max(1, math.floor(e_avg * d / B)) for d in D_i]


def epoch_average(tau_all: int, K: int, B: int, D: int) -> float:
    return float(Fraction(tau_all, K) * Fraction(B, D))


@dataclass
class ExperimentResult:
    algo: str
    seed: int
    records: List[RoundRecord]
    w_final: np.ndarray
    ledger: BudgetLedger
    L_trace: List[Optional[float]] = field(default_factory=list)
    tau_raw_trace: List[Optional[List[Optional[int]]]] = field(default_factory=list)
    w_trace: List[np.ndarray] = field(default_factory=list)
    shard_sizes: List[int] = field(default_factory=list)


@dataclass
class ExperimentData:
    spec: M.ModelSpec
    train: Dataset
    test: Dataset
    shards: List[Dataset]

    @property
    def shard_sizes(self) -> List[int]:
        return [len(s) for s in self.shards]


def load_data(cfg: ExperimentConfig, seed: int) -> ExperimentData:
    """Datasets, model and partition for one seed; every algorithm of that seed sees the same split."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        train = gen_synthetic(ds.n, ds.d, ds.classes, ds.separation, seed)
        test_seed = RngStream(seed).derive(TEST_STREAM).state
        test = gen_synthetic(ds.n_test, ds.d, ds.classes, ds.separation, test_seed)
    else:
        train = read_idx(ds.train_images, ds.train_labels)
        test = read_idx(ds.test_images, ds.test_labels)
    classes = 2 if cfg.model.kind == M.SQUARED_SVM else train.num_classes
    spec = M.ModelSpec(cfg.model.kind, train.feature_dim, classes, cfg.model.l2_reg)
    if cfg.n_clients == 1:
        shards = [train]
    else:
        plan = partition(train, cfg.partition, cfg.n_clients, seed)
        shards = [train.subset(s) for s in plan.shards]
    return ExperimentData(spec, train, test, shards)


def _handler(data: ExperimentData, cid: int, ccfg: ClientConfig, seed: int, estimate: bool):
    shard = data.shards[cid]

    def handle(start, prev):
        plan = LocalPlan(start.k, start.tau, start.w, None if prev is None else prev.grad)
        return client_round(plan, cid, data.spec, shard, ccfg, round_stream(seed, start.k, cid), estimate)

    return handle


def run_federated(
    algo: str,
    cfg: ExperimentConfig,
    seed: int,
    fixed_tau: Optional[Sequence[int]] = None,
    data: Optional[ExperimentData] = None,
    transport: Optional[str] = None,
    keep_weights: bool = False,
) -> ExperimentResult:
    """K rounds of ``fedveca`` (adaptive tau) or ``fedavg``/``fednova`` (fixed tau per client)."""
    if algo not in ("fedveca", "fedavg", "fednova"):
        raise ValueError(f"not a federated algorithm: {algo!r}")
    data = data or load_data(cfg, seed)
    adaptive = algo == "fedveca"
    if not adaptive:
        fixed_tau = fixed_tau if fixed_tau is not None else cfg.fixed_tau
        if fixed_tau is None:
            raise ValueError(f"{algo} needs fixed per-client tau (from a budget ledger or fixed_tau)")
        fixed_tau = [int(t) for t in fixed_tau]
    p = weights(data.shard_sizes)
    scfg = ServerConfig(
        n_clients=len(data.shards), eta=cfg.eta, alpha=cfg.alpha, rounds=cfg.rounds,
        tau_initial=cfg.tau_initial, max_tau=cfg.max_tau, adaptive=adaptive,
        rule="fedavg" if algo == "fedavg" else "fednova", fixed_tau=None if adaptive else fixed_tau,
    )
    server = Server(scfg, p, data.spec.zeros())
    ccfg = ClientConfig(cfg.eta, cfg.batch_size, cfg.max_tau, cfg.beta_source)
    handlers = [_handler(data, i, ccfg, seed, adaptive) for i in range(len(data.shards))]
    result = ExperimentResult(algo, seed, [], server.w, BudgetLedger(), shard_sizes=data.shard_sizes)
    if keep_weights:
        result.w_trace.append(server.w.copy())
    with open_transport(transport or cfg.transport, handlers) as tr:
        while True:
            plan = server.plan()
            out = server.step(tr.round(plan))
            loss, acc = evaluate(out.w_next, data.spec, data.test)
            result.ledger.tau_log.append(out.tau)
            result.L_trace.append(out.L)
            result.tau_raw_trace.append(out.tau_raw_next)
            if keep_weights:
                result.w_trace.append(out.w_next.copy())
            result.records.append(RoundRecord(
                round=out.k, algo=algo, seed=seed, loss=loss, accuracy=acc,
                tau_k=out.tau_k, eta_tau_L=out.premise, tau=list(out.tau),
                beta=out.beta or [], delta=out.delta or [], A=out.A or [],
            ))
            if out.stop:
                break
    result.w_final = server.w
    return result


def run_centralized(
    tau_all: int,
    B: int,
    spec: M.ModelSpec,
    dataset: Dataset,
    eta: float,
    seed: int,
    test_set: Optional[Dataset] = None,
    checkpoints: int = 1,
    algo: str = "centralized",
):
    """``tau_all`` minibatch SGD steps on the pooled data.

    Returns ``(w_final, records)`` with one record per checkpoint, evenly spaced
    over the budget, evaluated on ``test_set`` (or the training data).
    """
    if tau_all < 0:
        raise ValueError("tau_all must be >= 0")
    rng = RngStream(seed).derive(CENTRALIZED_STREAM)
    evalset = test_set if test_set is not None else dataset
    index = np.arange(len(dataset))
    marks = [math.ceil((c + 1) * tau_all / checkpoints) for c in range(checkpoints)]
    w = spec.zeros()
    records = []
    step = 0
    for c, mark in enumerate(marks):
        while step < mark:
            batch = sample_minibatch(index, B, rng)
            w = axpy(-eta, M.grad(spec, w, dataset.features[batch], dataset.labels[batch]), w)
            if not np.all(np.isfinite(w)):
                raise DivergenceError(step)
            step += 1
        loss, acc = evaluate(w, spec, evalset)
        records.append(RoundRecord(round=c, algo=algo, seed=seed, loss=loss, accuracy=acc))
    return w, records


def run_experiment(algo: str, cfg: ExperimentConfig, seed: Optional[int] = None,
                   ledger: Optional[BudgetLedger] = None, **kw) -> ExperimentResult:
    """Run one algorithm for one seed.

    Baselines take their fixed tau from ``ledger`` (the FedVeca run they are
    matched to) or from ``cfg.fixed_tau``; centralized SGD needs ``ledger``.
    """
    seed = cfg.seeds[0] if seed is None else seed
    data = kw.pop("data", None) or load_data(cfg, seed)
    if algo == "fedveca":
        return run_federated(algo, cfg, seed, data=data, **kw)
    if algo in ("fedavg", "fednova"):
        fixed = kw.pop("fixed_tau", None)
        if fixed is None and ledger is not None:
            fixed = budget_tau(ledger, cfg.rounds, cfg.batch_size, len(data.train), data.shard_sizes)
        return run_federated(algo, cfg, seed, fixed_tau=fixed, data=data, **kw)
    if algo == "centralized":
        if ledger is None:
            raise ValueError("centralized SGD needs the tau_all budget of a FedVeca run")
        w, recs = run_centralized(
            ledger.tau_all, cfg.batch_size, data.spec, data.train, cfg.eta, seed, data.test, cfg.rounds
        )
        return ExperimentResult(algo, seed, recs, w, ledger, shard_sizes=data.shard_sizes)
    raise ValueError(f"unknown algorithm {algo!r}")


@dataclass
class Comparison:
    seed: int
    fedveca: ExperimentResult
    fedavg: ExperimentResult
    fednova: ExperimentResult
    centralized: ExperimentResult
    baseline_tau: List[int]

    def results(self):
        return [self.fedveca, self.fedavg, self.fednova, self.centralized]


def compare(cfg: ExperimentConfig, seed: int, transport: Optional[str] = None) -> Comparison:
    """FedVeca first, then FedAvg/FedNova on the matched budget, then centralized SGD on tau_all."""
    data = load_data(cfg, seed)
    veca = run_federated("fedveca", cfg, seed, data=data, transport=transport)
    tau = budget_tau(veca.ledger, cfg.rounds, cfg.batch_size, len(data.train), data.shard_sizes)
    log.info("seed %d: tau_all=%d, baseline tau=%s", seed, veca.ledger.tau_all, tau)
    avg = run_federated("fedavg", cfg, seed, fixed_tau=tau, data=data, transport=transport)
    nova = run_federated("fednova", cfg, seed, fixed_tau=tau, data=data, transport=transport)
    cen = run_experiment("centralized", cfg, seed, ledger=veca.ledger, data=data)
    return Comparison(seed, veca, avg, nova, cen, tau)


def with_means(records: List[RoundRecord], seeds: Sequence[int]) -> List[RoundRecord]:
    return records + mean_records(records) if len(seeds) > 1 else records
