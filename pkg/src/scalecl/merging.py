"""Weight-space merging: task vectors, DARE, TIES, parallel/sequential merge, EMA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet, StructureError, check_compatible, compatible, lincomb

STRATEGIES = ("none", "sequential", "ema", "parallel")


@dataclass
class MergeConfig:
    strategy: str = "none"
    alpha: float = 0.5
    dare_p: float = 0.3
    ties_k: float = 0.2
    lam: float = 0.99
    seed: int = 0
    # parallel only: "none", "pt", "tasks" or "pt+tasks"
    parallel_replay: str = "tasks"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0.0 <= self.dare_p < 1.0:
            raise ValueError("dare_p must lie in [0, 1)")
        if not 0.0 < self.ties_k <= 1.0:
            raise ValueError("ties_k must lie in (0, 1]")
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lam must lie in [0, 1)")
        if self.parallel_replay not in ("none", "pt", "tasks", "pt+tasks"):
            raise ValueError("parallel_replay must be none, pt, tasks or pt+tasks")


@dataclass
class TaskVector:
    delta: ParamSet

    def norm(self) -> float:
        return self.delta.norm()


def _shared_rows(name: str, base: np.ndarray, other: np.ndarray) -> bool:
    """True when ``other`` extends ``base`` with extra leading-axis rows."""
    return (
        name.startswith("head.")
        and other.ndim == base.ndim
        and other.shape[0] >= base.shape[0]
        and other.shape[1:] == base.shape[1:]
    )


def task_vector(theta_star: ParamSet, theta0: ParamSet) -> TaskVector:
    """``theta_star - theta0`` over theta0's layout.

    Head rows that exist only in ``theta_star`` (classes unknown to theta0)
    are left out.
    """
    out = {}
    for name in theta0:
        if name not in theta_star:
            raise StructureError(f"{name} missing from fine-tuned parameters")
        a, b = theta_star[name], theta0[name]
        if a.shape == b.shape:
            out[name] = a - b
        elif _shared_rows(name, b, a):
            out[name] = a[: b.shape[0]] - b
        else:
            raise StructureError(f"{name}: shape {a.shape} vs {b.shape}")
    return TaskVector(ParamSet(out))


def apply(theta0: ParamSet, tau: TaskVector, scale: float = 1.0) -> ParamSet:
    return lincomb(1.0, theta0, scale, tau.delta)


def dare_sparsify(tau: TaskVector, p: float, seed: int) -> TaskVector:
    """Drop each entry with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("DARE drop probability must lie in [0, 1)")
    if p == 0.0:
        return TaskVector(tau.delta)
    flat = tau.delta.flatten()
    keep = np.random.default_rng(seed).random(flat.size) >= p
    return TaskVector(tau.delta.unflatten(np.where(keep, flat / (1.0 - p), 0.0)))


def _trim(v: np.ndarray, k: float) -> np.ndarray:
    n_keep = min(v.size, max(1, math.ceil(k * v.size))) if v.size else 0
    if n_keep == v.size:
        return v
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    out[order[:n_keep]] = v[order[:n_keep]]
    return out


def ties_merge(taus: list[TaskVector], k: float) -> TaskVector:
    """Trim to the top-k magnitude fraction, elect signs, average agreeing entries."""
    if not taus:
        raise ValueError("ties_merge needs at least one task vector")
    if not 0.0 < k <= 1.0:
        raise ValueError("k must lie in (0, 1]")
    ref = taus[0].delta
    for t in taus[1:]:
        check_compatible(ref, t.delta)
    stack = np.stack([_trim(t.delta.flatten(), k) for t in taus])
    # equal summed magnitude resolves to +
    sign = np.where(stack.sum(axis=0) >= 0.0, 1.0, -1.0)
    agree = (stack * sign) > 0.0
    count = agree.sum(axis=0)
    total = np.where(agree, stack, 0.0).sum(axis=0)
    merged = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return TaskVector(ref.unflatten(merged))


def parallel_merge(theta0: ParamSet, taus: list[TaskVector], cfg: MergeConfig) -> ParamSet:
    """``theta0 + alpha * TIES(DARE(tau_1), ..., DARE(tau_T))``."""
    if not taus:
        raise ValueError("parallel_merge needs at least one task vector")
    for t in taus:
        check_compatible(theta0, t.delta)
    sparse = [
        dare_sparsify(t, cfg.dare_p, int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0]))
        for i, t in enumerate(taus)
    ]
    return apply(theta0, ties_merge(sparse, cfg.ties_k), cfg.alpha)


def sequential_merge(theta_prev: ParamSet, theta_star: ParamSet, alpha: float) -> ParamSet:
    """``(1 - alpha) * theta_prev + alpha * theta_star``; new head rows are copied."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if list(theta_prev) != list(theta_star):
        raise StructureError("layer names differ")
    if compatible(theta_prev, theta_star):
        return lincomb(1.0 - alpha, theta_prev, alpha, theta_star)
    out = {}
    for name in theta_star:
        a, b = theta_prev[name], theta_star[name]
        if a.shape == b.shape:
            out[name] = (1.0 - alpha) * a + alpha * b
        elif _shared_rows(name, a, b):
            merged = b.copy()
            n = a.shape[0]
            merged[:n] = (1.0 - alpha) * a + alpha * b[:n]
            out[name] = merged
        else:
            raise StructureError(f"{name}: shape {a.shape} vs {b.shape}")
    return ParamSet(out)


@dataclass
class EmaTracker:
    lam: float
    shadow: ParamSet
    steps: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError("lambda must lie in [0, 1)")


def ema_update(tracker: EmaTracker, theta_k: ParamSet) -> EmaTracker:
    tracker.shadow = lincomb(tracker.lam, tracker.shadow, 1.0 - tracker.lam, theta_k)
    tracker.steps += 1
    return tracker


def ema_extend(tracker: EmaTracker, theta: ParamSet) -> EmaTracker:
    """Give the shadow the head rows ``theta`` has gained, copied as-is."""
    if compatible(tracker.shadow, theta):
        return tracker
    out = {}
    for name in theta:
        s, t = tracker.shadow[name], theta[name]
        if s.shape == t.shape:
            out[name] = s
        elif _shared_rows(name, s, t):
            out[name] = np.concatenate([s, t[s.shape[0]:]])
        else:
            raise StructureError(f"{name}: cannot extend shadow {s.shape} to {t.shape}")
    tracker.shadow = ParamSet(out)
    return tracker


def ema_adopt(tracker: EmaTracker, net):
    """Overwrite the network's weights with the shadow; the tracker keeps going."""
    check_compatible(net.param_set(), tracker.shadow)
    net.load_params(tracker.shadow)
    return net
