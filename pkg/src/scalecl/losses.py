"""Current-task loss with loss decoupling and the distillation replay loss.

All losses are batch means and return ``(value, dLoss/dLogits)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .params import StructureError


@dataclass
class LossConfig:
    kd_temperature: float = 2.0
    replay_scale: float = 1.0
    decouple_weight: float = 0.5
    standardize_epsilon: float = 1e-6

    def __post_init__(self):
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be positive")
        if self.standardize_epsilon <= 0:
            raise ValueError("standardize_epsilon must be positive")
        if self.replay_scale < 0:
            raise ValueError("replay_scale must be nonnegative")
        if not 0.0 <= self.decouple_weight <= 1.0:
            raise ValueError("decouple_weight must lie in [0, 1]")


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -float(np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def current_task_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    current_class_range: tuple[int, int],
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Blend of CE over the current task's head slice and CE over all classes.

    ``labels`` are head indices; ``current_class_range`` is the half-open
    slice ``[lo, hi)`` of head rows owned by the current task.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    lo, hi = current_class_range
    if labels.size and (labels.min() < lo or labels.max() >= hi):
        raise ValueError("labels fall outside the current class range")
    w = cfg.decouple_weight
    grad = np.zeros_like(logits)
    total = 0.0
    if w > 0:
        l_in, g_in = cross_entropy(logits[:, lo:hi], labels - lo)
        total += w * l_in
        grad[:, lo:hi] += w * g_in
    if w < 1:
        l_all, g_all = cross_entropy(logits, labels)
        total += (1 - w) * l_all
        grad += (1 - w) * g_all
    return total, grad


def _check_len(z: np.ndarray) -> None:
    if z.shape[-1] < 2:
        raise ValueError("standardization needs at least two logits")


def standardize_logits(z: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Z-score along the last axis; the std is floored at ``epsilon``."""
    z = np.asarray(z, dtype=np.float64)
    _check_len(z)
    mu = z.mean(axis=-1, keepdims=True)
    sd = np.maximum(z.std(axis=-1, keepdims=True), epsilon)
    return (z - mu) / sd


def _standardize_backward(z: np.ndarray, u: np.ndarray, g: np.ndarray, epsilon: float) -> np.ndarray:
    # u = (z - mean) / max(std, eps), rows independent
    sd_raw = z.std(axis=-1, keepdims=True)
    floored = sd_raw < epsilon
    sd = np.maximum(sd_raw, epsilon)
    gc = g - g.mean(axis=-1, keepdims=True)
    proj = np.where(floored, 0.0, np.mean(g * u, axis=-1, keepdims=True))
    return (gc - u * proj) / sd


def replay_kd_loss(
    student_logits: np.ndarray,
    stored_logits: Sequence[np.ndarray],
    labels: np.ndarray,
    cfg: LossConfig,
    columns: Sequence[np.ndarray | None] | None = None,
) -> tuple[float, np.ndarray]:
    """Mean over replay samples of CE + T^2 * KL(teacher || student).

    Teacher and student logits are both standardized and divided by the
    temperature. Sample ``i`` is compared on the first ``len(stored_logits[i])``
    student classes, or on the head columns ``columns[i]`` when given.
    """
    student = np.asarray(student_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = student.shape if student.ndim == 2 else (0, 0)
    if n == 0:
        return 0.0, np.zeros_like(student)
    if len(stored_logits) != n:
        raise StructureError("one stored logit vector is required per replay sample")
    if columns is None:
        columns = [None] * n
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (s, col) in enumerate(zip(stored_logits, columns)):
        if col is None and len(s) > k:
            raise StructureError("stored logits cover more classes than the student head")
        if col is not None and len(col) != len(s):
            raise StructureError("column map does not match stored logits")
        groups.setdefault((len(s), id(col)), []).append(i)
    ce, grad = cross_entropy(student, labels)
    T = cfg.kd_temperature
    eps = cfg.standardize_epsilon
    kd_total = 0.0
    for (length, _), rows in groups.items():
        rows = np.asarray(rows)
        col = columns[rows[0]]
        cols = np.arange(length) if col is None else np.asarray(col)
        teacher = np.stack([stored_logits[i] for i in rows])
        z = student[np.ix_(rows, cols)]
        u_s = standardize_logits(z, eps)
        u_t = standardize_logits(teacher, eps)
        logp = log_softmax(u_t / T)
        logq = log_softmax(u_s / T)
        p = np.exp(logp)
        kd_total += float(np.sum(p * (logp - logq)))
        # d(T^2 KL)/du_s = T (q - p)
        g_u = T * (np.exp(logq) - p) / n
        grad[np.ix_(rows, cols)] += _standardize_backward(z, u_s, g_u, eps)
    return ce + (T * T) * kd_total / n, grad


def kd_term(student_logits: np.ndarray, stored_logits: np.ndarray, cfg: LossConfig) -> float:
    """The distillation part alone for one sample (diagnostics and tests)."""
    L = len(stored_logits)
    T = cfg.kd_temperature
    logp = log_softmax(standardize_logits(stored_logits, cfg.standardize_epsilon) / T)
    logq = log_softmax(standardize_logits(np.asarray(student_logits)[:L], cfg.standardize_epsilon) / T)
    return float(T * T * np.sum(np.exp(logp) * (logp - logq)))


def batch_loss(task_part, replay_part, cfg: LossConfig):
    """Combine the task loss with the scaled replay loss.

    ``task_part`` is ``(logits, labels, class_range)``; ``replay_part`` is
    ``(logits, stored_logits, labels[, columns])`` or ``None``. Either part may be empty.
    Returns ``(total, d_task_logits, d_replay_logits)``.
    """
    t_logits, t_labels, rng = task_part
    if len(t_labels):
        total, d_task = current_task_loss(t_logits, t_labels, rng, cfg)
    else:
        total, d_task = 0.0, np.zeros_like(np.asarray(t_logits, dtype=np.float64))
    d_rep = None
    if replay_part is not None:
        r_logits, r_stored, r_labels, *rest = replay_part
        if len(r_labels):
            r_loss, d_rep = replay_kd_loss(r_logits, r_stored, r_labels, cfg, *rest)
            total += cfg.replay_scale * r_loss
            d_rep = cfg.replay_scale * d_rep
        else:
            d_rep = np.zeros_like(np.asarray(r_logits, dtype=np.float64))
    return total, d_task, d_rep
