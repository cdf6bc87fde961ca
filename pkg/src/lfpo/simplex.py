"""Vector arithmetic on the probability simplex.

Distributions, velocities and the cross-entropy / flow-matching losses used
throughout the package.  Everything here is float64 and works on the last
axis, so a ``(..., V)`` stack of rows is handled the same way as a single row.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import InvalidInputError

PROB_FLOOR = 1e-300


class ProbabilityFloorWarning(RuntimeWarning):
    """Raised (as a warning) when a zero probability had to be clamped before a log."""


def _as_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise InvalidInputError(f"{name} must be a vector, got a scalar")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return x


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")


def softmax(z) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    z = _as_vector(z, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z) -> np.ndarray:
    z = _as_vector(z, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def one_hot(index: int, V: int) -> np.ndarray:
    if V < 2:
        raise InvalidInputError("vocabulary size must be at least 2")
    if not 0 <= index < V:
        raise InvalidInputError(f"token id {index} outside [0, {V})")
    x = np.zeros(V)
    x[index] = 1.0
    return x


def mask_prior(V: int) -> np.ndarray:
    """The uniform point at the centre of the simplex."""
    if V < 2:
        raise InvalidInputError("vocabulary size must be at least 2")
    return np.full(V, 1.0 / V)


def interpolate_state(x1, m, alpha: float) -> np.ndarray:
    """Point ``(1 - alpha) * m + alpha * x1`` on the segment from the mask prior to the data vertex."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    x1 = _as_vector(x1, "x1")
    m = _as_vector(m, "m")
    _check_same_shape(x1, m)
    return (1.0 - alpha) * m + alpha * x1


def model_velocity(p, x_t) -> np.ndarray:
    """Displacement from the base point ``x_t`` to the model prediction ``p``."""
    p = _as_vector(p, "p")
    x_t = _as_vector(x_t, "x_t")
    _check_same_shape(p, x_t)
    return p - x_t


def target_velocity(x1, x_t) -> np.ndarray:
    x1 = _as_vector(x1, "x1")
    x_t = _as_vector(x_t, "x_t")
    _check_same_shape(x1, x_t)
    return x1 - x_t


def fm_loss(p, x1) -> float:
    """Squared Euclidean distance between the prediction and the data vertex.

    The shared base point cancels, so this equals the squared velocity error
    for any choice of base.
    """
    p = _as_vector(p, "p")
    x1 = _as_vector(x1, "x1")
    _check_same_shape(p, x1)
    return float(np.sum((p - x1) ** 2))


def entropy(p) -> float:
    p = _as_vector(p, "p")
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def ce_loss(target, pred, strict: bool = False) -> float:
    """Cross-entropy ``-sum(target * log(pred))``.

    Zero-probability entries of ``pred`` under positive ``target`` mass are
    clamped to ``PROB_FLOOR`` with a :class:`ProbabilityFloorWarning`, or
    rejected when ``strict`` is set.
    """
    target = _as_vector(target, "target")
    pred = _as_vector(pred, "pred")
    _check_same_shape(target, pred)
    support = target > 0
    bad = support & (pred <= 0)
    if np.any(bad):
        if strict:
            raise InvalidInputError("pred assigns zero probability where target is positive")
        warnings.warn("clamped zero probability before log", ProbabilityFloorWarning, stacklevel=2)
    safe = np.maximum(pred[support], PROB_FLOOR)
    return float(-np.sum(target[support] * np.log(safe)))


def ce_gradient(pred, target) -> np.ndarray:
    """Gradient of ``ce_loss(target, softmax(z))`` with respect to ``z``.

    Holds for one-hot and soft targets alike as long as ``target`` sums to one:
    the result is the residual ``pred - target``.
    """
    pred = _as_vector(pred, "pred")
    target = _as_vector(target, "target")
    _check_same_shape(pred, target)
    return pred - target
