"""Client-side procedure: local SGD, the normalized direction, and the beta/delta estimators."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Union

import numpy as np

from . import model as M
from .data import Dataset, sample_minibatch
from .fed_core import ClientReport, RoundPlan
from .numerics import RngStream, axpy, l2_norm

DENOM_GUARD = 1e-12


class DivergenceError(FloatingPointError):
    def __init__(self, iteration: int, client_id: Optional[int] = None):
        who = "" if client_id is None else f"client {client_id}: "
        super().__init__(f"{who}non-finite parameters at local iteration {iteration}")
        self.iteration = iteration
        self.client_id = client_id


@dataclass
class LocalTrajectory:
    params: List[np.ndarray]
    minibatch_grads: List[np.ndarray]

    @property
    def tau(self) -> int:
        return len(self.minibatch_grads)

    def grad_sum(self) -> np.ndarray:
        total = np.zeros_like(self.params[0])
        for g in self.minibatch_grads:
            total += g
        return total


def local_train(w_k, tau: int, spec: M.ModelSpec, shard: Dataset, eta: float, B: int, rng: RngStream):
    """Run ``tau`` minibatch SGD steps from ``w_k``.

    Parameters are kept in the telescoped form ``w^l = w_k - eta * (g_0 + ... + g_{l-1})``,
    which is the same recursion as stepping ``w^{l+1} = w^l - eta * g_l`` but
    keeps the round's end point identical to the server's reconstruction.
    Returns ``(trajectory, G)`` with ``G`` the mean of the ``tau`` gradients.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if not eta > 0:
        raise ValueError("eta must be positive")
    w_k = np.asarray(w_k, dtype=np.float64)
    index = np.arange(len(shard))
    params = [w_k.copy()]
    grads = []
    running = np.zeros_like(w_k)
    for lam in range(tau):
        batch = sample_minibatch(index, B, rng)
        g = M.grad(spec, params[-1], shard.features[batch], shard.labels[batch])
        grads.append(g)
        running = running + g
        w_next = axpy(-eta, running, w_k)
        if not np.all(np.isfinite(w_next)):
            raise DivergenceError(lam)
        params.append(w_next)
    traj = LocalTrajectory(params, grads)
    return traj, running / tau


def estimate_beta(traj: LocalTrajectory, grad_at_start, local_grads=None) -> float:
    """Largest ratio of gradient change to parameter change along the trajectory.

    ``local_grads[l]`` is the gradient at ``w^l``; defaults to the stored
    minibatch gradients. Ratios whose parameter change is below 1e-12 are skipped.
    """
    grads = traj.minibatch_grads if local_grads is None else local_grads
    w_k = traj.params[0]
    best = 0.0
    for lam in range(traj.tau):
        den = l2_norm(w_k - traj.params[lam])
        if den < DENOM_GUARD:
            continue
        best = max(best, l2_norm(grad_at_start - grads[lam]) / den)
    return best


def estimate_delta(traj: LocalTrajectory, prev_global_grad, delta_cap: float) -> float:
    """max over l in [1, tau-1] of ||sum_{s<=l} g_s||^2 / ((l+1) ||grad F(w_{k-1})||^2)."""
    gnorm2 = l2_norm(prev_global_grad) ** 2
    if l2_norm(prev_global_grad) < DENOM_GUARD:
        return float(delta_cap)
    best = 0.0
    running = np.zeros_like(traj.params[0])
    for lam, g in enumerate(traj.minibatch_grads):
        running = running + g
        if lam == 0:
            continue
        best = max(best, l2_norm(running) ** 2 / ((lam + 1) * gnorm2))
    return best


class LocalPlan(NamedTuple):
    """The part of a round plan one client receives."""

    k: int
    tau: int
    w: np.ndarray
    prev_global_grad: Optional[np.ndarray] = None


@dataclass
class ClientConfig:
    eta: float
    batch_size: int
    max_tau: int = 50
    beta_source: str = "minibatch"

    @property
    def delta_cap(self) -> float:
        return 10.0 * self.max_tau


def client_round(
    plan: Union[RoundPlan, LocalPlan],
    client_id: int,
    spec: M.ModelSpec,
    shard: Dataset,
    cfg: ClientConfig,
    rng: RngStream,
    estimate: bool = True,
) -> ClientReport:
    """One round of the client procedure; estimators run only when ``k >= 1`` and ``estimate``."""
    w_k = plan.w
    tau = int(plan.tau) if isinstance(plan, LocalPlan) else int(plan.tau_per_client[client_id])
    grad0 = M.full_grad(spec, w_k, shard.features, shard.labels)
    loss0 = M.loss(spec, w_k, shard.features, shard.labels)
    try:
        traj, G = local_train(w_k, tau, spec, shard, cfg.eta, cfg.batch_size, rng)
    except DivergenceError as exc:
        raise DivergenceError(exc.iteration, client_id) from None
    beta = delta = None
    if estimate and plan.k >= 1:
        local = None
        if cfg.beta_source == "full":
            local = [M.full_grad(spec, w, shard.features, shard.labels) for w in traj.params[:-1]]
        beta = estimate_beta(traj, grad0, local)
        delta = estimate_delta(traj, plan.prev_global_grad, cfg.delta_cap)
    return ClientReport(
        client_id=client_id,
        tau_used=tau,
        G=G,
        grad_sum=traj.grad_sum(),
        grad_at_start=grad0,
        loss_at_start=loss0,
        beta=beta,
        delta=delta,
    )


def round_stream(seed: int, k: int, client_id: int) -> RngStream:
    """Minibatch stream for one (round, client) pair."""
    return RngStream(seed).derive(k, client_id)
