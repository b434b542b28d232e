"""Server-side procedure: aggregation, smoothness estimation and the step-count controller."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError
from .fed_core import RoundPlan, aggregate_fedavg, aggregate_fednova, sort_reports
from .numerics import l2_norm

log = logging.getLogger(__name__)

L_GUARD = 1e-12
A_GUARD = 1e-15


def _exact(x: float) -> Fraction:
    # Parameters arrive as decimal literals (0.95); recover that value rather than
    # the nearest binary float so that floor(1 / (1 - 0.95)) is 20, not 19.
    return Fraction(repr(float(x)))


def global_gradient(reports, p) -> np.ndarray:
    """Weighted average of the clients' full local gradients at the round's start."""
    p = np.asarray(p, dtype=np.float64)
    reports = sort_reports(reports, len(p))
    out = np.zeros_like(reports[0].grad_at_start)
    for pi, r in zip(p, reports):
        out += pi * r.grad_at_start
    return out


def compute_A(beta: float, delta: float, eta: float) -> float:
    return eta * beta * beta * delta


def tau_bound(A: Sequence[float], alpha: float) -> List[Optional[Fraction]]:
    """Exact upper bounds ``A_i / (A_i - alpha * min A)``; ``None`` for clients under the zero guard."""
    a_exact = [_exact(a) for a in A]
    alpha_q = _exact(alpha)
    live = [a for a, raw in zip(a_exact, A) if raw >= A_GUARD]
    if not live:
        return [None] * len(A)
    a_min = min(live)
    return [None if raw < A_GUARD else a / (a - alpha_q * a_min) for a, raw in zip(a_exact, A)]


def predict_tau_raw(A: Sequence[float], alpha: float) -> List[Optional[int]]:
    """Pre-clamp prediction ``floor(A_i / (A_i - alpha * min_j A_j))``."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if any(a < 0 or not math.isfinite(a) for a in A):
        raise ValueError("A values must be finite and non-negative")
    return [None if b is None else math.floor(b) for b in tau_bound(A, alpha)]


def predict_tau(A: Sequence[float], alpha: float, max_tau: int) -> List[int]:
    """Next-round local step counts: the floor prediction, reset to 2 when <= 1, capped at ``max_tau``.

    Clients whose A is below 1e-15 get ``max_tau``.
    """
    out = []
    for t in predict_tau_raw(A, alpha):
        if t is None:
            out.append(int(max_tau))
            continue
        if t <= 1:
            t = 2
        out.append(min(t, int(max_tau)))
    return out


def premise_value(eta: float, tau_k: float, L: float) -> float:
    return eta * tau_k * L


@dataclass
class EstimatorState:
    L_history: List[float] = field(default_factory=list)
    L: float = 0.0
    w_history: List[np.ndarray] = field(default_factory=list)
    global_grad_history: List[np.ndarray] = field(default_factory=list)
    A_per_client: Optional[List[float]] = None
    premise_trace: List[Optional[float]] = field(default_factory=list)

    def record(self, w_k, global_grad) -> None:
        # Only the two most recent snapshots are ever needed.
        self.w_history = (self.w_history + [np.asarray(w_k)])[-2:]
        self.global_grad_history = (self.global_grad_history + [np.asarray(global_grad)])[-2:]

    @property
    def prev_w(self):
        return self.w_history[-1] if self.w_history else None

    @property
    def prev_global_grad(self):
        return self.global_grad_history[-1] if self.global_grad_history else None


def estimate_L(state: EstimatorState, k: int) -> float:
    """Fold the one-round-stale estimate ``L_{k-1}`` into the running max and return it.

    ``state`` must hold ``w_{k-1}``, ``grad F(w_{k-1})`` as its latest
    snapshots (and ``w_{k-2}``, ``grad F(w_{k-2})`` before them when ``k >= 2``).
    """
    if k < 1:
        raise ValueError("L is estimated from round 1 on")
    w1, g1 = state.w_history[-1], state.global_grad_history[-1]
    if k == 1:
        num, den = l2_norm(g1), l2_norm(w1)
    else:
        w0, g0 = state.w_history[-2], state.global_grad_history[-2]
        num, den = l2_norm(g1 - g0), l2_norm(w1 - w0)
    if den >= L_GUARD:
        est = num / den
        state.L_history.append(est)
        state.L = max(state.L, est)
    return state.L


@dataclass
class ServerConfig:
    n_clients: int
    eta: float = 0.01
    alpha: float = 0.95
    rounds: int = 100
    tau_initial: int = 5
    max_tau: int = 50
    adaptive: bool = True
    rule: str = "fednova"  # "fednova" or "fedavg"
    fixed_tau: Optional[Sequence[int]] = None


@dataclass
class RoundOutcome:
    k: int
    w_next: np.ndarray
    tau: List[int]
    tau_k: float
    global_grad: np.ndarray
    L: Optional[float]
    premise: Optional[float]
    beta: Optional[List[float]]
    delta: Optional[List[float]]
    A: Optional[List[float]]
    tau_raw_next: Optional[List[Optional[int]]]
    tau_next: List[int]
    stop: bool


class Server:
    """Single logical actor driving rounds; state changes only inside :meth:`step`."""

    def __init__(self, cfg: ServerConfig, p, w0):
        if cfg.adaptive and not 0.0 < cfg.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {cfg.alpha}")
        self.cfg = cfg
        self.p = np.asarray(p, dtype=np.float64)
        self.state = EstimatorState()
        self.k = 0
        self.w = np.asarray(w0, dtype=np.float64)
        if cfg.fixed_tau is not None:
            self.tau = [int(t) for t in cfg.fixed_tau]
        else:
            self.tau = [int(cfg.tau_initial)] * cfg.n_clients
        self._warned_alpha = False

    def plan(self) -> RoundPlan:
        prev = self.state.prev_global_grad if self.k >= 1 else None
        return RoundPlan(self.k, tuple(self.tau), self.w.copy(), prev)

    def step(self, reports) -> RoundOutcome:
        cfg = self.cfg
        k = self.k
        reports = sort_reports(reports, cfg.n_clients)
        for r, t in zip(reports, self.tau):
            if r.tau_used != t:
                raise ValueError(f"client {r.client_id} ran {r.tau_used} steps, plan said {t}")
        g_k = global_gradient(reports, self.p)
        if cfg.rule == "fedavg":
            w_next = aggregate_fedavg(
                [r.grad_sum for r in reports], [r.tau_used for r in reports], self.p, cfg.eta, self.w,
                require_uniform=False,
            )
            tau_k = float(sum(pi * r.tau_used for pi, r in zip(self.p, reports)))
        else:
            w_next, tau_k, _ = aggregate_fednova(reports, self.p, cfg.eta, self.w)

        beta = delta = A = raw = None
        L = premise = None
        tau_next = list(self.tau)
        if k >= 1:
            L = estimate_L(self.state, k)
            premise = premise_value(cfg.eta, tau_k, L)
            if premise < 1.0:
                log.info("round %d: premise eta*tau_k*L = %.4g < 1", k, premise)
            if cfg.adaptive:
                beta = [float(r.beta) for r in reports]
                delta = [float(r.delta) for r in reports]
                A = [compute_A(b, d, cfg.eta) for b, d in zip(beta, delta)]
                self.state.A_per_client = A
                raw = predict_tau_raw(A, cfg.alpha)
                tau_next = predict_tau(A, cfg.alpha, cfg.max_tau)
                self._check_alpha(A, L)
        self.state.premise_trace.append(premise)
        self.state.record(self.w, g_k)

        outcome = RoundOutcome(
            k=k, w_next=w_next, tau=list(self.tau), tau_k=tau_k, global_grad=g_k, L=L, premise=premise,
            beta=beta, delta=delta, A=A, tau_raw_next=raw, tau_next=tau_next, stop=(k + 1 >= cfg.rounds),
        )
        self.w = w_next
        self.tau = tau_next
        self.k = k + 1
        return outcome

    def _check_alpha(self, A, L) -> None:
        live = [a for a in A if a >= A_GUARD]
        if self._warned_alpha or not live or L <= 0:
            return
        limit = 2.0 * L / min(live)
        if limit < 1.0 and self.cfg.alpha >= limit:
            log.warning("alpha=%.3g exceeds 2L/min A = %.3g in the small-L regime", self.cfg.alpha, limit)
            self._warned_alpha = True
