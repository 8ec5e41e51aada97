"""Synthetic continual-learning streams: Gaussian class clusters in R^d.

Class means and the anisotropic noise profile come from ``world_seed`` and
are shared by every run of a spec. The run seed only decides which
downstream classes form which task. Each task position ``t`` applies its own
orthogonal transform whose distance from the identity grows with
``rotation``, so nuisance directions differ between tasks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class StreamSpec:
    n_tasks: int = 20
    classes_per_task: int = 6
    pt_classes: int = 20
    input_dim: int = 32
    train_per_class: int = 50
    val_per_class: int = 10
    test_per_class: int = 30
    pt_train_per_class: int = 100
    pt_val_per_class: int = 20
    pt_test_per_class: int = 40
    margin: float = 8.0
    spread: float = 1.0
    anisotropy: float = 2.5
    rotation: float = 0.6
    world_seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 1 or self.classes_per_task < 1:
            raise ValueError("n_tasks and classes_per_task must be >= 1")
        if self.pt_classes < 2:
            raise ValueError("pre-training needs at least two classes")

    @property
    def n_downstream(self) -> int:
        return self.n_tasks * self.classes_per_task

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, classes) -> "Split":
        m = np.isin(self.y, list(classes))
        return Split(self.X[m], self.y[m])


@dataclass
class TaskData:
    index: int  # 1-based task position; 0 is pre-training
    classes: list[int]
    train: Split
    val: Split
    test: Split


@dataclass
class Stream:
    spec: StreamSpec
    pretrain: TaskData
    tasks: list[TaskData] = field(default_factory=list)

    @property
    def all_classes(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]


def _orthogonal(rng: np.random.Generator, d: int, strength: float) -> np.ndarray:
    """Cayley transform of a scaled random skew matrix (identity at 0)."""
    if strength == 0:
        return np.eye(d)
    g = rng.normal(size=(d, d))
    s = strength * (g - g.T) / np.sqrt(2 * d)
    eye = np.eye(d)
    return np.linalg.solve(eye - s, eye + s)


def _world(spec: StreamSpec):
    # separate generators so the PT half of the world does not depend on stream length
    def part(i):
        return np.random.default_rng([spec.world_seed, 0xC1A55, i])

    d = spec.input_dim
    sd = spec.margin / np.sqrt(2 * d)
    means = np.vstack([part(0).normal(0.0, sd, size=(spec.pt_classes, d)),
                       part(1).normal(0.0, sd, size=(spec.n_downstream, d))])
    scales = spec.spread * np.geomspace(spec.anisotropy, 1.0 / spec.anisotropy, d) if spec.anisotropy > 0 else np.full(d, spec.spread)
    basis = _orthogonal(part(2), d, 1.0)
    rot_rng = part(3)
    rotations = [np.eye(d)] + [_orthogonal(rot_rng, d, spec.rotation) for _ in range(spec.n_tasks)]
    return means, scales, basis, rotations


def _sample(rng, means, scales, basis, rot, classes, n):
    d = means.shape[1]
    X = np.empty((len(classes) * n, d))
    y = np.repeat(np.asarray(classes, dtype=np.int64), n)
    for i, c in enumerate(classes):
        noise = rng.normal(size=(n, d)) * scales @ basis.T
        X[i * n:(i + 1) * n] = (means[c] + noise) @ rot.T
    order = rng.permutation(len(y))
    return Split(X[order], y[order])


def _task(rng, world, index, classes, n_train, n_val, n_test) -> TaskData:
    means, scales, basis, rotations = world
    rot = rotations[index]
    return TaskData(
        index,
        list(classes),
        _sample(rng, means, scales, basis, rot, classes, n_train),
        _sample(rng, means, scales, basis, rot, classes, n_val),
        _sample(rng, means, scales, basis, rot, classes, n_test),
    )


def generate_stream(spec: StreamSpec, seed: int) -> Stream:
    """Deterministic in ``(spec, seed)``; PT and downstream class ids are disjoint."""
    world = _world(spec)
    pt_rng = np.random.default_rng([spec.world_seed, 0x9E7])
    pt_classes = list(range(spec.pt_classes))
    pretrain = _task(pt_rng, world, 0, pt_classes,
                     spec.pt_train_per_class, spec.pt_val_per_class, spec.pt_test_per_class)
    rng = np.random.default_rng([spec.world_seed, int(seed), 0x7A5C])
    pool = spec.pt_classes + rng.permutation(spec.n_downstream)
    tasks = []
    for t in range(spec.n_tasks):
        cls = sorted(int(c) for c in pool[t * spec.classes_per_task:(t + 1) * spec.classes_per_task])
        tasks.append(_task(rng, world, t + 1, cls,
                           spec.train_per_class, spec.val_per_class, spec.test_per_class))
    return Stream(spec, pretrain, tasks)
