"""Shared optimisation loop pieces: LR schedule, one replay-aware step, accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .buffer import BufferEntry, ReplayBuffer, RetrievalState, gather
from .losses import LossConfig, batch_loss
from .net import AdamW, Network, SGD, make_optimizer
from .params import StructureError


@dataclass
class OptimConfig:
    name: str = "sgd"
    lr: float = 0.004
    momentum: float = 0.9
    weight_decay: float = 0.0

    def build(self) -> SGD | AdamW:
        if self.name == "sgd":
            return make_optimizer("sgd", momentum=self.momentum, weight_decay=self.weight_decay)
        return make_optimizer(self.name, weight_decay=self.weight_decay)


def warmup_cosine_lr(epoch: float, peak: float, warmup_epochs: float, total_epochs: float) -> float:
    """Linear 0 -> peak over the warmup, then cosine peak -> 0 at ``total_epochs``."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return peak * epoch / warmup_epochs
    span = total_epochs - warmup_epochs
    if span <= 0:
        return peak
    frac = min(max((epoch - warmup_epochs) / span, 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class Sampler:
    """How replay entries are retrieved from the buffer."""

    mode: str = "class"  # "class" or "task"
    pt_weight: float = 1.0
    tasks: Sequence[int] | None = None
    classes: Sequence[int] | None = None

    def draw(self, buffer: ReplayBuffer, n: int, state: RetrievalState) -> list[BufferEntry]:
        if n == 0:
            return []
        if self.mode == "task":
            return buffer.sample_task_uniform(n, self.pt_weight, state, tasks=self.tasks)
        classes = self.classes
        if classes is None and self.tasks is not None:
            allowed = set(self.tasks)
            classes = [c for c in buffer.classes if buffer.class_task[c] in allowed]
        return buffer.sample_class_uniform(n, state, classes=classes)


def replay_arrays(net: Network, entries: Sequence[BufferEntry]):
    """Inputs, head-index labels, teacher logits and teacher column maps.

    A column map is ``None`` when the teacher's classes are a prefix of the
    current head, else the head rows of the teacher's classes.
    """
    X, labels, stored, logit_classes = gather(entries)
    head = tuple(net.classes)
    maps: dict = {}
    for lc in logit_classes:
        key = id(lc)
        if key in maps:
            continue
        if lc is None:
            raise StructureError("replay entry has no expert logits")
        maps[key] = None if head[: len(lc)] == lc else net.class_index(lc)
    columns = [maps[id(lc)] for lc in logit_classes]
    return X, net.class_index(labels), stored, columns


def train_step(
    net: Network,
    opt,
    lr: float,
    x_task: np.ndarray,
    y_task: np.ndarray,
    class_range: tuple[int, int],
    replay: Sequence[BufferEntry],
    loss_cfg: LossConfig,
) -> float:
    """One optimizer step on a concatenated task + replay batch.

    ``y_task`` holds head indices.
    """
    n_task = len(y_task)
    if replay:
        xr, yr, stored, columns = replay_arrays(net, replay)
        X = np.vstack([x_task, xr]) if n_task else xr
    else:
        X = x_task
    logits, trace = net.forward(X)
    rep_part = (logits[n_task:], stored, yr, columns) if replay else None
    total, d_task, d_rep = batch_loss((logits[:n_task], y_task, class_range), rep_part, loss_cfg)
    dlogits = d_task if d_rep is None else np.vstack([d_task, d_rep])
    grads = net.backward(trace, dlogits)
    opt.step(net.trainable(), grads, lr)
    net.mark_updated()
    return total


def accuracy(net: Network, X: np.ndarray, labels: np.ndarray, restrict: Sequence[int] | None = None) -> float:
    """Top-1 accuracy; ``restrict`` limits the argmax to the given class ids."""
    if len(labels) == 0:
        return float("nan")
    logits = net.logits(X)
    classes = np.asarray(net.classes)
    if restrict is not None:
        cols = net.class_index(restrict)
        pred = classes[cols][np.argmax(logits[:, cols], axis=1)]
    else:
        pred = classes[np.argmax(logits, axis=1)]
    return float(np.mean(pred == np.asarray(labels)))


StepHook = Callable[[Network], None]
