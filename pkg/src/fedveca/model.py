"""Convex linear models with analytic gradients.

Both models append a constant-1 feature for the bias. ``squared_svm`` maps
integer labels to ``y = +1`` for even labels and ``y = -1`` for odd ones, so
a 2-class dataset uses label 0 -> +1, label 1 -> -1 and MNIST digits become
the even/odd task. ``multinomial_logistic`` stores a ``(num_classes, d + 1)``
weight matrix flattened row-major, one block per class.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError

SQUARED_SVM = "squared_svm"
LOGISTIC = "multinomial_logistic"
MODEL_KINDS = (SQUARED_SVM, LOGISTIC)


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    feature_dim: int
    num_classes: int = 2
    l2_reg: float = 0.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.kind == SQUARED_SVM and self.num_classes != 2:
            raise ValueError("squared_svm is a binary model (num_classes == 2)")
        if self.kind == LOGISTIC and self.num_classes < 2:
            raise ValueError("multinomial_logistic needs num_classes >= 2")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")

    @property
    def dim(self) -> int:
        if self.kind == SQUARED_SVM:
            return self.feature_dim + 1
        return (self.feature_dim + 1) * self.num_classes

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


def svm_targets(labels: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(labels) % 2 == 0, 1.0, -1.0)


def _augment(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _check(spec: ModelSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[0] == 0 or len(y) == 0:
        raise EmptyBatchError("batch is empty")
    if w.shape != (spec.dim,):
        raise DimensionError(f"parameter dim {w.shape} does not match model dim {spec.dim}")
    if x.shape[1] != spec.feature_dim:
        raise DimensionError(f"feature dim {x.shape[1]} does not match model ({spec.feature_dim})")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def scores(spec: ModelSpec, w, x) -> np.ndarray:
    """Raw model outputs: margins ``w.x + b`` (svm) or logits of shape (n, C)."""
    xa = _augment(x)
    w = np.asarray(w, dtype=np.float64)
    if spec.kind == SQUARED_SVM:
        return xa @ w
    return xa @ w.reshape(spec.num_classes, -1).T


def loss(spec: ModelSpec, w, x, labels) -> float:
    w = np.asarray(w, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    _check(spec, w, x, labels)
    s = scores(spec, w, x)
    if spec.kind == SQUARED_SVM:
        slack = np.maximum(0.0, 1.0 - svm_targets(labels) * s)
        data_term = float(np.mean(slack * slack))
    else:
        lp = _log_softmax(s)
        data_term = float(-np.mean(lp[np.arange(len(labels)), labels]))
    if spec.l2_reg:
        data_term += 0.5 * spec.l2_reg * float(w @ w)
    return data_term


def grad(spec: ModelSpec, w, x, labels) -> np.ndarray:
    """Exact gradient of :func:`loss` with respect to ``w``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    _check(spec, w, x, labels)
    xa = _augment(x)
    n = xa.shape[0]
    if spec.kind == SQUARED_SVM:
        y = svm_targets(labels)
        slack = np.maximum(0.0, 1.0 - y * (xa @ w))
        g = xa.T @ (-2.0 * y * slack) / n
    else:
        logits = xa @ w.reshape(spec.num_classes, -1).T
        resid = np.exp(_log_softmax(logits))
        resid[np.arange(n), labels] -= 1.0
        g = (resid.T @ xa).ravel() / n
    if spec.l2_reg:
        g = g + spec.l2_reg * w
    return g


FULL_GRAD_CHUNK = 4096


def full_grad(spec: ModelSpec, w, x, labels) -> np.ndarray:
    """Gradient over a whole shard, accumulated chunk by chunk in index order."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n = x.shape[0]
    if n == 0:
        raise EmptyBatchError("shard is empty")
    if n <= FULL_GRAD_CHUNK:
        return grad(spec, w, x, labels)
    reg = ModelSpec(spec.kind, spec.feature_dim, spec.num_classes, 0.0)
    total = np.zeros(spec.dim)
    for start in range(0, n, FULL_GRAD_CHUNK):
        stop = min(start + FULL_GRAD_CHUNK, n)
        total += grad(reg, w, x[start:stop], labels[start:stop]) * (stop - start)
    total /= n
    if spec.l2_reg:
        total = total + spec.l2_reg * np.asarray(w, dtype=np.float64)
    return total


def predict(spec: ModelSpec, w, x) -> np.ndarray:
    """Class predictions: +/-1 for the svm (a score of exactly 0 predicts +1), argmax otherwise."""
    s = scores(spec, w, x)
    if spec.kind == SQUARED_SVM:
        return np.where(s >= 0.0, 1, -1)
    return np.argmax(s, axis=1)


def accuracy(spec: ModelSpec, w, x, labels) -> float:
    labels = np.atleast_1d(np.asarray(labels))
    truth = svm_targets(labels) if spec.kind == SQUARED_SVM else labels
    return float(np.mean(predict(spec, w, x) == truth))
