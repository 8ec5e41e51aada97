"""Class-balanced replay buffer with frozen expert logits and windowed dedup.

Admission is a per-class reservoir. Retrieval draws a class (or a task,
then a class) uniformly and then an entry uniformly within the class,
skipping any entry retrieved within the last ``window`` draws.

Sidecar byte layout (little-endian)::

    0    8   magic b"SCLBUF\\x00\\x00"
    8    4   uint32 format version (1)
    12   4   uint32 header length H
    16   H   UTF-8 JSON header (capacity, window, counters, entry manifest)
    ...      float32 inputs, one row of input_dim per entry, manifest order
    ...      float32 expert logits, concatenated per entry (may be empty)
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._backend import NEVER, kernels
from .params import CheckpointCorruptError, CheckpointFormatError, StructureError

BUF_MAGIC = b"SCLBUF\x00\x00"
BUF_VERSION = 1
_HEAD = struct.Struct("<8sII")
DEFAULT_WINDOW = 4000


class RetrievalError(RuntimeError):
    """Nothing eligible to retrieve."""


@dataclass(eq=False)
class BufferEntry:
    uid: int
    x: np.ndarray
    label: int
    task_id: int
    expert_logits: np.ndarray | None = None
    logit_classes: tuple[int, ...] | None = None

    def set_logits(self, logits: np.ndarray, classes: Sequence[int]) -> None:
        if self.expert_logits is not None:
            return
        arr = np.array(logits, dtype=np.float64)
        arr.setflags(write=False)
        self.expert_logits = arr
        self.logit_classes = tuple(int(c) for c in classes)


def _seed_state(seed: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed)
    return ss.generate_state(1, dtype=np.uint64).copy()


@dataclass
class RetrievalState:
    """Dedup window plus the retrieval RNG; one per training stream."""

    window: int | None = DEFAULT_WINDOW
    seed: int = 0
    auto_window: bool = True
    rng: np.ndarray = field(init=False)
    last_seen: np.ndarray = field(init=False)
    pos: int = 0
    dedup_relaxed: int = 0

    def __post_init__(self):
        self.rng = _seed_state(self.seed)
        self.last_seen = np.full(64, NEVER, dtype=np.int64)

    def effective_window(self, total_entries: int) -> int:
        w = DEFAULT_WINDOW if self.window is None else int(self.window)
        if self.auto_window:
            w = min(w, max(total_entries - 1, 0))
        return w

    def _reserve(self, n_uids: int):
        if n_uids > len(self.last_seen):
            size = max(n_uids, 2 * len(self.last_seen))
            grown = np.full(size, NEVER, dtype=np.int64)
            grown[: len(self.last_seen)] = self.last_seen
            self.last_seen = grown

    def ring(self, window: int | None = None) -> list[int]:
        """Uids currently inside the window, oldest first."""
        w = self.effective_window(10**12) if window is None else window
        idx = np.flatnonzero(self.last_seen >= self.pos - w)
        return [int(u) for u in idx[np.argsort(self.last_seen[idx], kind="stable")]]


class ReplayBuffer:
    def __init__(self, capacity: int = 20, input_dim: int | None = None, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.input_dim = input_dim
        self.class_task: dict[int, int] = {}
        self.seen: dict[int, int] = {}
        self._slots: dict[int, list[BufferEntry]] = {}
        self._next_uid = 0
        self._rng = _seed_state(seed + 0x5EED)
        self._layout_cache: dict = {}

    def reseed(self, seed: int) -> None:
        """Restart the admission stream (e.g. for a new run)."""
        self._rng = _seed_state(seed + 0x5EED)

    # -- bookkeeping ---------------------------------------------------------

    def register_classes(self, task_id: int, classes: Iterable[int]) -> None:
        for c in classes:
            c = int(c)
            prev = self.class_task.get(c)
            if prev is not None and prev != task_id:
                raise ValueError(f"class {c} already registered for task {prev}")
            self.class_task[c] = int(task_id)
            self.seen.setdefault(c, 0)
            self._slots.setdefault(c, [])

    @property
    def classes(self) -> list[int]:
        return [c for c, s in self._slots.items() if s]

    @property
    def tasks(self) -> list[int]:
        return sorted({self.class_task[c] for c in self.classes})

    def __len__(self) -> int:
        return sum(len(s) for s in self._slots.values())

    def entries(self, classes: Iterable[int] | None = None) -> list[BufferEntry]:
        keys = self._slots if classes is None else [int(c) for c in classes]
        return [e for c in keys for e in self._slots.get(c, [])]

    def class_count(self, c: int) -> int:
        return len(self._slots.get(int(c), []))

    # -- admission -----------------------------------------------------------

    def admit(self, x: np.ndarray, label: int, task_id: int) -> BufferEntry | None:
        return self.admit_many(np.asarray(x)[None, :], [label], task_id)[0]

    def admit_many(self, X: np.ndarray, labels: Sequence[int], task_id: int) -> list[BufferEntry | None]:
        """Offer samples in order; returns the stored entry or ``None`` per sample."""
        X = np.asarray(X, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if self.input_dim is None:
            self.input_dim = X.shape[1]
        elif X.shape[1] != self.input_dim:
            raise StructureError("input dimension mismatch")
        result: list[BufferEntry | None] = [None] * len(labels)
        for c in np.unique(labels):
            c = int(c)
            if self.class_task.get(c) != task_id:
                raise ValueError(f"class {c} is not registered for task {task_id}")
            rows = np.flatnonzero(labels == c)
            slots = kernels.reservoir_slots(self.seen[c], self.capacity, len(rows), self._rng)
            self.seen[c] += len(rows)
            self._layout_cache.clear()
            store = self._slots[c]
            for r, s in zip(rows, slots):
                uid = self._next_uid
                self._next_uid += 1
                if s < 0:
                    continue
                x = X[r].copy()
                x.setflags(write=False)
                entry = BufferEntry(uid, x, c, int(task_id))
                if s == len(store):
                    store.append(entry)
                else:
                    store[s] = entry
                result[r] = entry
        return result

    # -- expert logits -------------------------------------------------------

    def capture_expert_logits(self, model, class_set: Iterable[int]) -> int:
        """Freeze ``model`` logits into every entry of ``class_set`` lacking them."""
        todo = [e for e in self.entries(class_set) if e.expert_logits is None]
        if not todo:
            return 0
        head = set(model.classes)
        missing = {e.label for e in todo} - head
        if missing:
            raise StructureError(f"classes {sorted(missing)} are outside the model head")
        logits = model.logits(np.stack([e.x for e in todo]))
        for e, z in zip(todo, logits):
            e.set_logits(z, model.classes)
        return len(todo)

    # -- retrieval -----------------------------------------------------------

    def _layout(self, groups: list[list[int]], weights: list[float]):
        key = (tuple(map(tuple, groups)), tuple(weights))
        hit = self._layout_cache.get(key)
        if hit is None:
            hit = self._layout_cache[key] = self._build_layout(groups, weights)
        return hit

    def _build_layout(self, groups, weights):
        class_offsets, class_slots, slot_uid, flat = [0], [], [], []
        class_local: dict[int, int] = {}
        for cls in groups:
            for c in cls:
                if c in class_local:
                    continue
                class_local[c] = len(class_offsets) - 1
                for e in self._slots[c]:
                    class_slots.append(len(flat))
                    slot_uid.append(e.uid)
                    flat.append(e)
                class_offsets.append(len(class_slots))
        group_offsets, group_classes = [0], []
        for cls in groups:
            group_classes.extend(class_local[c] for c in cls)
            group_offsets.append(len(group_classes))
        return (
            np.cumsum(np.asarray(weights, dtype=np.float64)),
            np.asarray(group_offsets, dtype=np.int64),
            np.asarray(group_classes, dtype=np.int64),
            np.asarray(class_offsets, dtype=np.int64),
            np.asarray(class_slots, dtype=np.int64),
            np.asarray(slot_uid, dtype=np.int64),
            flat,
        )

    def _draw(self, groups, weights, n, state: RetrievalState) -> list[BufferEntry]:
        if n == 0:
            return []
        cumw, goff, gcls, coff, cslots, suid, flat = self._layout(groups, weights)
        state._reserve(self._next_uid)
        out = np.empty(n, dtype=np.int64)
        window = state.effective_window(len(self))
        state.pos, relaxed = kernels.draw_entries(
            cumw, goff, gcls, coff, cslots, suid, state.last_seen, state.rng,
            state.pos, window, n, out,
        )
        state.dedup_relaxed += relaxed
        return [flat[i] for i in out]

    def _eligible(self, classes: Iterable[int] | None) -> list[int]:
        pool = self.classes if classes is None else [int(c) for c in classes if self._slots.get(int(c))]
        return sorted(pool)

    def sample_class_uniform(
        self, n: int, state: RetrievalState, classes: Iterable[int] | None = None
    ) -> list[BufferEntry]:
        if n < 0:
            raise ValueError("n must be >= 0")
        if n == 0:
            return []
        pool = self._eligible(classes)
        if not pool:
            raise RetrievalError("no stored classes to replay")
        return self._draw([pool], [1.0], n, state)

    def sample_task_uniform(
        self,
        n: int,
        pt_weight: float,
        state: RetrievalState,
        tasks: Iterable[int] | None = None,
    ) -> list[BufferEntry]:
        """Task 0 has weight ``pt_weight``; every other task has weight 1."""
        if n < 0:
            raise ValueError("n must be >= 0")
        if pt_weight < 0:
            raise ValueError("pt_weight must be >= 0")
        if n == 0:
            return []
        by_task: dict[int, list[int]] = {}
        for c in self._eligible(None):
            by_task.setdefault(self.class_task[c], []).append(c)
        chosen = sorted(by_task) if tasks is None else sorted(t for t in set(tasks) if t in by_task)
        groups, weights = [], []
        for t in chosen:
            w = pt_weight if t == 0 else 1.0
            if w > 0:
                groups.append(by_task[t])
                weights.append(w)
        if not groups:
            raise RetrievalError("no previous task with positive retrieval weight")
        return self._draw(groups, weights, n, state)

    # -- persistence ---------------------------------------------------------

    def dump(self, path: str | os.PathLike) -> None:
        entries = self.entries()
        manifest = [
            {
                "uid": e.uid,
                "label": e.label,
                "task_id": e.task_id,
                "n_logits": 0 if e.expert_logits is None else len(e.expert_logits),
                "logit_classes": None if e.logit_classes is None else list(e.logit_classes),
            }
            for e in entries
        ]
        header = json.dumps(
            {
                "capacity": self.capacity,
                "input_dim": self.input_dim,
                "next_uid": self._next_uid,
                "rng": int(self._rng[0]),
                "class_task": [[c, t] for c, t in self.class_task.items()],
                "seen": [[c, n] for c, n in self.seen.items()],
                "entries": manifest,
            },
            sort_keys=True,
        ).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_HEAD.pack(BUF_MAGIC, BUF_VERSION, len(header)))
            fh.write(header)
            for e in entries:
                fh.write(np.asarray(e.x, dtype="<f4").tobytes())
            for e in entries:
                if e.expert_logits is not None:
                    fh.write(np.asarray(e.expert_logits, dtype="<f4").tobytes())

    @classmethod
    def restore(cls, path: str | os.PathLike) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < _HEAD.size:
            raise CheckpointFormatError(f"{path}: file too short")
        magic, version, hlen = _HEAD.unpack_from(blob, 0)
        if magic != BUF_MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        if version != BUF_VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        try:
            header = json.loads(blob[_HEAD.size:_HEAD.size + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: unreadable header") from exc
        manifest = header["entries"]
        d = header["input_dim"] or 0
        n_logits = sum(m["n_logits"] for m in manifest)
        payload = blob[_HEAD.size + hlen:]
        if len(payload) != 4 * (d * len(manifest) + n_logits):
            raise CheckpointCorruptError(f"{path}: payload size does not match manifest")
        buf = cls(header["capacity"], input_dim=header["input_dim"])
        buf._rng[0] = np.uint64(header["rng"])
        buf._next_uid = header["next_uid"]
        for c, t in header["class_task"]:
            buf.register_classes(t, [c])
        buf.seen = {int(c): int(n) for c, n in header["seen"]}
        values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        X = values[: d * len(manifest)].reshape(len(manifest), d) if d else np.zeros((len(manifest), 0))
        pos = d * len(manifest)
        for m, x in zip(manifest, X):
            x = x.copy()
            x.setflags(write=False)
            e = BufferEntry(m["uid"], x, m["label"], m["task_id"])
            if m["n_logits"]:
                e.set_logits(values[pos:pos + m["n_logits"]], m["logit_classes"])
                pos += m["n_logits"]
            buf._slots[m["label"]].append(e)
        return buf


def gather(entries: Sequence[BufferEntry]):
    """Stack entries into ``(X, labels, stored_logits, logit_classes)``."""
    if not entries:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64), [], []
    X = np.stack([e.x for e in entries])
    labels = np.array([e.label for e in entries], dtype=np.int64)
    return X, labels, [e.expert_logits for e in entries], [e.logit_classes for e in entries]
