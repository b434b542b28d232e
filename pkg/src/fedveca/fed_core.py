"""Round messages and the global aggregation rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import DimensionError, axpy


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class RoundPlan:
    """What the server sends for round ``k``; ``prev_global_grad`` is the estimate at ``w_{k-1}``."""

    k: int
    tau_per_client: tuple
    w: np.ndarray
    prev_global_grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("round index must be >= 0")
        if any(int(t) < 1 for t in self.tau_per_client):
            raise ValueError("every tau must be >= 1")
        if (self.prev_global_grad is None) != (self.k == 0):
            raise ValueError("prev_global_grad must be present exactly when k >= 1")


@dataclass(frozen=True)
class ClientReport:
    """Client payload for one round.

    ``G`` is the normalized direction (mean of the local minibatch gradients),
    ``grad_sum`` the plain sum of the same gradients. Both are sent so the
    FedAvg rule can consume the unnormalized sum and the single-client case
    reduces exactly to local SGD.
    """

    client_id: int
    tau_used: int
    G: np.ndarray
    grad_sum: np.ndarray
    grad_at_start: np.ndarray
    loss_at_start: float
    beta: Optional[float] = None
    delta: Optional[float] = None

    def __eq__(self, other):
        if not isinstance(other, ClientReport):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and self.tau_used == other.tau_used
            and _same_float(self.loss_at_start, other.loss_at_start)
            and _same_float(self.beta, other.beta)
            and _same_float(self.delta, other.delta)
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (self.G, self.grad_sum, self.grad_at_start),
                    (other.G, other.grad_sum, other.grad_at_start),
                )
            )
        )

    __hash__ = None


def _same_float(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a == b or (a != a and b != b)


def weights(shard_sizes: Sequence[int]) -> np.ndarray:
    """Aggregation weights ``p_i = D_i / D``."""
    sizes = np.asarray(shard_sizes, dtype=np.int64)
    if sizes.size == 0 or np.any(sizes < 1):
        raise ValueError("every shard must hold at least one sample")
    return sizes / float(sizes.sum())


def sort_reports(reports, n_clients: int) -> list:
    by_id = {}
    for r in reports:
        by_id[r.client_id] = r
    missing = [i for i in range(n_clients) if i not in by_id]
    if missing:
        raise AggregationError(f"missing reports from clients {missing}")
    out = [by_id[i] for i in range(n_clients)]
    dims = {r.G.shape for r in out}
    if len(dims) != 1:
        raise DimensionError(f"report dimensions disagree: {sorted(dims)}")
    return out


def aggregate_fednova(reports, p, eta: float, w_k):
    """Normalized averaging step ``w_{k+1} = w_k - eta * tau_k * d_k``.

    Returns ``(w_next, tau_k, d_k)``. The step is evaluated as
    ``sum_i (p_i * tau_k / tau_i) * grad_sum_i``, which equals ``tau_k * d_k``
    algebraically and makes a lone client reproduce its local trajectory bit
    for bit.
    """
    p = np.asarray(p, dtype=np.float64)
    reports = sort_reports(reports, len(p))
    tau_k = 0.0
    d_k = np.zeros_like(reports[0].G)
    for pi, r in zip(p, reports):
        tau_k += pi * r.tau_used
        d_k += pi * r.G
    step = np.zeros_like(d_k)
    for pi, r in zip(p, reports):
        step += (pi * tau_k / r.tau_used) * r.grad_sum
    return axpy(-eta, step, w_k), tau_k, d_k


def aggregate_fedavg(grad_sums, taus, p, eta: float, w_k, require_uniform: bool = True):
    """Plain FedAvg step ``w_{k+1} = w_k - eta * sum_i p_i * grad_sum_i``.

    The rule presumes every client ran the same number of local steps;
    ``require_uniform=False`` applies it anyway (budget-matched baselines on
    unequal shards).
    """
    p = np.asarray(p, dtype=np.float64)
    if len(grad_sums) != len(p) or len(taus) != len(p):
        raise AggregationError("need one gradient sum and tau per client")
    if require_uniform and len(set(int(t) for t in taus)) > 1:
        raise AggregationError(f"FedAvg requires uniform tau, got {list(taus)}")
    step = np.zeros_like(np.asarray(grad_sums[0], dtype=np.float64))
    for pi, s in zip(p, grad_sums):
        step += pi * np.asarray(s, dtype=np.float64)
    return axpy(-eta, step, w_k)


def aggregate_general(local_grads, a_weights, p, eta: float, w_k):
    """Generalized rule with per-step accumulation weights ``a_i``.

    ``local_grads[i]`` is the (tau_i, dim) stack of client ``i``'s gradients and
    ``a_weights[i]`` its non-negative length-tau_i weight vector. Only the
    all-ones case is exercised by the algorithms here.
    """
    step = np.zeros(np.asarray(local_grads[0]).shape[1])
    for pi, g, a in zip(p, local_grads, a_weights):
        a = np.asarray(a, dtype=np.float64)
        G = (a[:, None] * np.asarray(g)).sum(axis=0) / a.sum()
        step += pi * a.sum() * G
    return axpy(-eta, step, w_k)
