"""Replay-ratio batch composition, consolidation budgets and TRP accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .buffer import ReplayBuffer, RetrievalState
from .losses import LossConfig
from .net import Network
from .training import OptimConfig, Sampler, StepHook, train_step, warmup_cosine_lr


class ScheduleError(RuntimeError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class ReplaySchedule:
    """Per-batch task/replay split at a fixed replay ratio.

    Replay counts are assigned so the running total of replay samples is
    always ``round_half_up(rr * running task samples)``; that keeps the
    realised ratio exact over a task instead of drifting per batch.
    """

    rr: float
    batch_task_samples: int
    task_seen: int = 0
    replay_given: int = 0

    def __post_init__(self):
        if self.rr < 0:
            raise ValueError("replay ratio must be >= 0")
        if self.batch_task_samples < 1:
            raise ValueError("batch_task_samples must be >= 1")

    @classmethod
    def from_total(cls, total_batch: int, rr: float) -> "ReplaySchedule":
        """Split a fixed total batch so that replay / task ~= rr."""
        return cls(rr, max(1, round_half_up(total_batch / (1.0 + rr))))

    def reset(self) -> None:
        self.task_seen = 0
        self.replay_given = 0

    def replay_for(self, n_task: int) -> int:
        self.task_seen += n_task
        target = round_half_up(self.rr * self.task_seen)
        n = target - self.replay_given
        self.replay_given = target
        return n


def compose_batch(schedule: ReplaySchedule, buffer_state, n_task: int | None = None) -> tuple[int, int]:
    """Return ``(n_task, n_replay)`` for the next batch.

    ``buffer_state`` is a :class:`ReplayBuffer` or the number of stored entries.
    """
    n_task = schedule.batch_task_samples if n_task is None else int(n_task)
    stored = len(buffer_state) if isinstance(buffer_state, ReplayBuffer) else int(buffer_state)
    n_replay = schedule.replay_for(n_task)
    if n_replay > 0 and stored == 0:
        raise ScheduleError("replay requested but the buffer is empty")
    return n_task, n_replay


@dataclass
class TaskBudget:
    task: int
    n_task: int = 0
    n_replay_task: int = 0
    n_baseline: int = 0
    n_consol: int = 0

    @property
    def n_saved(self) -> int:
        return self.n_baseline - self.n_replay_task


@dataclass
class BudgetLedger:
    tasks: dict[int, TaskBudget] = field(default_factory=dict)

    def _get(self, task: int) -> TaskBudget:
        if task not in self.tasks:
            self.tasks[task] = TaskBudget(task)
        return self.tasks[task]

    def record_task(self, task: int, n_task: int, n_replay: int) -> None:
        b = self._get(task)
        b.n_task += n_task
        b.n_baseline += n_task
        b.n_replay_task += n_replay

    def record_consolidation(self, task: int, n: int) -> None:
        if n:
            self._get(task).n_consol += n

    def saved_replay(self, task: int) -> int:
        return self.tasks[task].n_saved

    def trp(self, upto: int | None = None) -> float:
        rows = [b for t, b in sorted(self.tasks.items()) if upto is None or t <= upto]
        if not rows:
            raise ValueError("ledger is empty")
        base = sum(b.n_baseline for b in rows)
        if base == 0:
            raise ValueError("ledger has no baseline samples")
        return 100.0 * sum(b.n_replay_task + b.n_consol for b in rows) / base

    def totals(self) -> dict[str, int]:
        rows = list(self.tasks.values())
        return {
            "n_task": sum(b.n_task for b in rows),
            "n_replay_task": sum(b.n_replay_task for b in rows),
            "n_saved": sum(b.n_saved for b in rows),
            "n_consol": sum(b.n_consol for b in rows),
        }

    def rows(self) -> list[dict]:
        out = []
        for t, b in sorted(self.tasks.items()):
            out.append({
                "task": t,
                "n_task": b.n_task,
                "n_replay_task": b.n_replay_task,
                "n_saved": b.n_saved,
                "n_consol": b.n_consol,
                "trp": self.trp(upto=t),
            })
        return out


def saved_replay(ledger: BudgetLedger, task: int) -> int:
    return ledger.saved_replay(task)


def trp(ledger: BudgetLedger) -> float:
    return ledger.trp()


@dataclass
class ConsolidationPlan:
    csr: float = 0.0
    batch_size: int = 32
    chunks: int = 4
    warmup_chunks: int = 1
    lr: float | None = None  # defaults to the task-phase peak LR
    every_k_tasks: int = 1

    def __post_init__(self):
        if not 0.0 <= self.csr <= 1.0:
            raise ValueError("csr must lie in [0, 1]")
        if self.batch_size < 1 or self.chunks < 1 or self.every_k_tasks < 1:
            raise ValueError("batch_size, chunks and every_k_tasks must be >= 1")


def consolidation_budget(plan: ConsolidationPlan, n_saved: int) -> int:
    if n_saved < 0:
        raise ValueError("n_saved must be >= 0")
    return round_half_up(plan.csr * n_saved)


def run_consolidation(
    model: Network,
    buffer: ReplayBuffer,
    plan: ConsolidationPlan,
    budget: int,
    loss_cfg: LossConfig,
    *,
    state: RetrievalState,
    optim: OptimConfig,
    ledger: BudgetLedger | None = None,
    task: int = 0,
    sampler: Sampler | None = None,
    required_classes=None,
    lora_rank: int | None = None,
    lora_targets=None,
    seed: int = 0,
    val_fn: Callable[[Network], float] | None = None,
    on_step: StepHook | None = None,
    class_trace: list | None = None,
) -> Network:
    """Train on replay only for exactly ``budget`` samples.

    The budget is split into ``plan.chunks`` equal stretches; with ``val_fn``
    the best post-chunk checkpoint is returned. With ``lora_rank`` a fresh
    adapter set is attached for the phase and merged at its end.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    if budget == 0:
        return model
    if required_classes is not None:
        missing = set(required_classes) - set(buffer.classes)
        if missing:
            raise ScheduleError(f"buffer lacks classes {sorted(missing)} for consolidation")
    if len(buffer) == 0:
        raise ScheduleError("consolidation needs a nonempty buffer")
    sampler = sampler or Sampler()
    net = model
    if lora_rank:
        net.attach_lora(lora_rank, lora_targets, seed=seed)
    opt = optim.build()
    peak = plan.lr if plan.lr is not None else optim.lr
    n_batches = -(-budget // plan.batch_size)
    chunks = min(plan.chunks, n_batches)
    bounds = [round_half_up(n_batches * (i + 1) / chunks) for i in range(chunks)]
    best, best_score = None, -math.inf
    empty_x = np.zeros((0, net.config.input_dim))
    empty_y = np.zeros(0, dtype=np.int64)
    used = 0
    b = 0
    for ci, end in enumerate(bounds):
        while b < end:
            n = min(plan.batch_size, budget - used)
            entries = sampler.draw(buffer, n, state)
            if class_trace is not None:
                class_trace.extend(e.label for e in entries)
            lr = warmup_cosine_lr(b / n_batches * chunks, peak, min(plan.warmup_chunks, chunks - 1), chunks)
            train_step(net, opt, lr, empty_x, empty_y, (0, net.n_classes), entries, loss_cfg)
            if on_step is not None:
                on_step(net)
            used += n
            b += 1
        if val_fn is not None:
            snap = net.copy()
            if snap.adapters:
                snap.merge_lora()
            score = val_fn(snap)
            if score > best_score:
                best, best_score = snap, score
    if ledger is not None:
        ledger.record_consolidation(task, used)
    if best is None:
        if net.adapters:
            net.merge_lora()
        return net
    if net.adapters:
        net.merge_lora()
    net.load_params(best.param_set(), classes=best.classes)
    return net



def simulate_budget(
    rr: float,
    csr: float,
    n_tasks: int = 20,
    samples_per_task: int = 300,
    epochs: int = 8,
    batch_size: int = 32,
    first_replay_task: int = 1,
    every_k_tasks: int = 1,
) -> BudgetLedger:
    """Ledger of a run with the same batching as training, minus the training.

    Tasks before ``first_replay_task`` have nothing to replay and run at rr=0.
    """
    plan = ConsolidationPlan(csr, batch_size, every_k_tasks=every_k_tasks)
    ledger = BudgetLedger()
    pending = 0
    for t in range(1, n_tasks + 1):
        task_rr = rr if t >= first_replay_task else 0.0
        sched = ReplaySchedule.from_total(batch_size, task_rr)
        bt = sched.batch_task_samples
        for _ in range(epochs):
            left = samples_per_task
            while left > 0:
                n_task, n_rep = compose_batch(sched, 1, n_task=min(bt, left))
                ledger.record_task(t, n_task, n_rep)
                left -= n_task
        pending += ledger.saved_replay(t)
        if csr > 0 and (t % plan.every_k_tasks == 0 or t == n_tasks):
            ledger.record_consolidation(t, consolidation_budget(plan, pending))
            pending = 0
    return ledger
