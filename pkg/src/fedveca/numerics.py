"""Dense vector helpers, a pinned pseudo-random generator and a gradient oracle.

Parameter and gradient vectors are plain 1-D ``numpy.float64`` arrays.

RngStream
---------
SplitMix64, bit-exact::

    state  <- (state + 0x9E3779B97F4A7C15) mod 2**64
    z      <- state
    z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
    z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
    output <- z ^ (z >> 31)

Integers in ``[0, n)`` are ``output % n``. Uniform reals in ``[0, 1)`` are
``(output >> 11) * 2**-53``. Normals use Box-Muller on two consecutive
uniforms ``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.

Sub-streams are derived by ``derive(*keys)``: starting from the parent's
current state ``s``, each key ``k`` (a non-negative int) updates
``s <- mix(s ^ mix(k + GOLDEN))`` where ``mix`` is the output function above
applied to its argument. The parent is not advanced.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


class DimensionError(ValueError):
    """Operands disagree in dimension."""


def as_vector(values) -> np.ndarray:
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def dot(a, b) -> float:
    # fsum is correctly rounded, so the result does not depend on summation order.
    a = as_vector(a)
    b = as_vector(b)
    _check_dims(a, b)
    return math.fsum((a * b).tolist())


def l2_norm(v) -> float:
    # hypot rescales internally, so tiny nonzero vectors do not underflow to 0.
    return math.hypot(*as_vector(v).tolist())


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``y + alpha * x`` as a new vector."""
    x = as_vector(x)
    y = as_vector(y)
    _check_dims(x, y)
    return y + alpha * x


def finite_diff_grad(f: Callable[[np.ndarray], float], w, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``w``."""
    if not h > 0:
        raise ValueError("h must be positive")
    w = as_vector(w)
    out = np.empty_like(w)
    for j in range(w.shape[0]):
        up = w.copy()
        dn = w.copy()
        up[j] += h
        dn[j] -= h
        fu, fd = float(f(up)), float(f(dn))
        if not (math.isfinite(fu) and math.isfinite(fd)):
            raise FloatingPointError(f"non-finite function value at coordinate {j}")
        out[j] = (fu - fd) / (2.0 * h)
    return out


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


_U64_M1 = np.uint64(_M1)
_U64_M2 = np.uint64(_M2)


def _mix_array(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _U64_M1
        z = (z ^ (z >> np.uint64(27))) * _U64_M2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Single-owner SplitMix64 stream. See the module docstring for the exact algorithm."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        return _mix(self.state)

    def u64_block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN)
        self.state = (self.state + n * GOLDEN) & MASK64
        return _mix_array(states)

    def integers(self, n: int, size: int) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        return (self.u64_block(size) % np.uint64(n)).astype(np.int64)

    def uniform(self, size: int) -> np.ndarray:
        return (self.u64_block(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, size: int) -> np.ndarray:
        u = self.uniform(2 * size)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def derive(self, *keys: int) -> "RngStream":
        s = self.state
        for k in keys:
            s = _mix(s ^ _mix((int(k) + GOLDEN) & MASK64))
        return RngStream(s)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.u64_block(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[pos] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
