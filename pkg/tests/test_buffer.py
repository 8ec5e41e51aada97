import numpy as np
import pytest
from scipy import stats

from scalecl import _backend
from scalecl.buffer import (
    BUF_MAGIC,
    ReplayBuffer,
    RetrievalError,
    RetrievalState,
    gather,
)
from scalecl.net import NetConfig, Network
from scalecl.params import CheckpointCorruptError, CheckpointFormatError, StructureError


def filled(n_classes=3, per_class=20, capacity=20, dim=4, tasks=None, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity, seed=seed)
    tasks = tasks or {c: 0 for c in range(n_classes)}
    for c, t in tasks.items():
        buf.register_classes(t, [c])
        buf.admit_many(rng.normal(size=(per_class, dim)), [c] * per_class, t)
    return buf


def test_under_capacity_keeps_everything():
    buf = filled(1, per_class=10)
    assert buf.class_count(0) == 10
    assert [e.uid for e in buf.entries()] == list(range(10))


def test_capacity_bound_never_exceeded_across_interleavings():
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(20)
    buf.register_classes(0, [0, 1])
    for _ in range(200):
        k = int(rng.integers(1, 80))
        buf.admit_many(rng.normal(size=(k, 2)), rng.integers(0, 2, size=k), 0)
        assert buf.class_count(0) <= 20 and buf.class_count(1) <= 20
    buf.admit_many(np.zeros((10_000, 2)), [0] * 10_000, 0)
    assert buf.class_count(0) == 20


def test_reservoir_retention_matches_binomial():
    # first-admitted sample survives with probability capacity / n
    trials, n, cap = 10_000, 200, 20
    kept = 0
    X = np.zeros((n, 1))
    for t in range(trials):
        buf = ReplayBuffer(cap, seed=t)
        buf.register_classes(0, [0])
        buf.admit_many(X, [0] * n, 0)
        kept += any(e.uid == 0 for e in buf.entries())
    p = cap / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert abs(kept - trials * p) < 3 * sigma


def test_admission_errors():
    buf = ReplayBuffer(5)
    buf.register_classes(1, [3])
    with pytest.raises(ValueError):
        buf.admit(np.zeros(2), 4, 1)
    with pytest.raises(ValueError):
        buf.register_classes(2, [3])
    buf.admit(np.zeros(2), 3, 1)
    with pytest.raises(StructureError):
        buf.admit(np.zeros(3), 3, 1)
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_stored_inputs_are_read_only():
    buf = filled(1, per_class=2)
    with pytest.raises(ValueError):
        buf.entries()[0].x[0] = 1.0


def test_zero_draws_and_empty_buffer():
    buf = filled(2)
    assert buf.sample_class_uniform(0, RetrievalState()) == []
    with pytest.raises(RetrievalError):
        ReplayBuffer(3).sample_class_uniform(1, RetrievalState())
    with pytest.raises(ValueError):
        buf.sample_class_uniform(-1, RetrievalState())


def _no_dup_in_windows(uids, w):
    last = {}
    for i, u in enumerate(uids):
        if u in last and i - last[u] < w:
            return False
        last[u] = i
    return True


def test_dedup_window_one_class_5000_entries():
    buf = filled(1, per_class=5000, capacity=5000, dim=1)
    state = RetrievalState(window=4000, seed=11)
    uids = [e.uid for e in buf.sample_class_uniform(12_000, state)]
    assert _no_dup_in_windows(uids, 4000)
    assert state.dedup_relaxed == 0
    assert len(state.ring()) <= 4000


def test_dedup_window_across_calls():
    buf = filled(4, per_class=100, capacity=100)
    state = RetrievalState(window=100, seed=2)
    uids = []
    for _ in range(60):
        uids += [e.uid for e in buf.sample_class_uniform(7, state)]
    assert state.dedup_relaxed == 0
    assert _no_dup_in_windows(uids, 100)


def test_auto_window_caps_at_stock_minus_one():
    state = RetrievalState(window=4000)
    assert state.effective_window(60) == 59
    assert state.effective_window(10_000) == 4000
    assert RetrievalState(window=50, auto_window=False).effective_window(10) == 50


def test_exhausted_window_relaxes_to_oldest():
    buf = filled(1, per_class=3, capacity=3)
    state = RetrievalState(window=10, auto_window=False, seed=0)
    uids = [e.uid for e in buf.sample_class_uniform(9, state)]
    assert sorted(uids[:3]) == [0, 1, 2]
    # once all three are blocked every draw falls back to the oldest
    assert uids[3:] == uids[:3] * 2
    assert state.dedup_relaxed == 6


def test_class_uniform_chi_square():
    buf = filled(60, per_class=20, capacity=20, dim=1)
    draws = buf.sample_class_uniform(100_000, RetrievalState(seed=5))
    counts = np.bincount([e.label for e in draws], minlength=60)
    assert stats.chisquare(counts).pvalue > 0.01


def test_class_uniform_restricted():
    buf = filled(5)
    got = {e.label for e in buf.sample_class_uniform(500, RetrievalState(), classes=[1, 3])}
    assert got == {1, 3}


def test_task_uniform_pt_weight_frequencies():
    tasks = {c: 0 for c in range(10)}
    tasks.update({10 + c: 1 for c in range(6)})
    tasks.update({16 + c: 2 for c in range(6)})
    buf = filled(tasks=tasks, dim=1)
    n = 100_000
    draws = buf.sample_task_uniform(n, 2.0, RetrievalState(seed=9))
    counts = np.bincount([buf.class_task[e.label] for e in draws], minlength=3)
    for k, p in zip(counts, (0.5, 0.25, 0.25)):
        assert abs(k - n * p) < 3 * np.sqrt(n * p * (1 - p))
    assert stats.chisquare(counts, n * np.array([0.5, 0.25, 0.25])).pvalue > 0.01
    # within a task, classes are uniform
    pt = np.bincount([e.label for e in draws if e.label < 10], minlength=10)
    assert stats.chisquare(pt).pvalue > 0.01


def test_task_uniform_zero_pt_weight_excludes_pretraining():
    buf = filled(tasks={0: 0, 1: 0, 2: 1, 3: 2})
    draws = buf.sample_task_uniform(2000, 0.0, RetrievalState())
    assert all(buf.class_task[e.label] != 0 for e in draws)
    with pytest.raises(RetrievalError):
        buf.sample_task_uniform(5, 0.0, RetrievalState(), tasks=[0])
    with pytest.raises(ValueError):
        buf.sample_task_uniform(5, -1.0, RetrievalState())


def test_single_task_degenerates_to_class_uniform():
    buf = filled(tasks={0: 1, 1: 1, 2: 1})
    a = buf.sample_task_uniform(300, 1.0, RetrievalState(seed=4))
    b = buf.sample_class_uniform(300, RetrievalState(seed=4))
    assert [e.uid for e in a] == [e.uid for e in b]


def test_retrieval_is_deterministic_per_seed():
    buf = filled(6)
    a = [e.uid for e in buf.sample_class_uniform(200, RetrievalState(seed=1))]
    b = [e.uid for e in buf.sample_class_uniform(200, RetrievalState(seed=1))]
    c = [e.uid for e in buf.sample_class_uniform(200, RetrievalState(seed=2))]
    assert a == b and a != c


def test_expert_logits_frozen_and_prefix_sized(rng):
    net = Network(NetConfig(4, [5], 3), seed=0)
    buf = filled(3, per_class=5, dim=4)
    assert buf.capture_expert_logits(net, [0, 1, 2]) == 15
    snap = [e.expert_logits.tobytes() for e in buf.entries()]
    expected = net.logits(np.stack([e.x for e in buf.entries()]))
    np.testing.assert_array_equal(np.stack([e.expert_logits for e in buf.entries()]), expected)
    net.params["head.weight"] += 1.0
    net.grow_head(3)
    assert buf.capture_expert_logits(net, [0, 1, 2]) == 0
    assert [e.expert_logits.tobytes() for e in buf.entries()] == snap
    assert all(len(e.expert_logits) == 3 and e.logit_classes == (0, 1, 2) for e in buf.entries())
    with pytest.raises(ValueError):
        buf.entries()[0].expert_logits[0] = 0.0


def test_capture_outside_head_is_structural_error():
    net = Network(NetConfig(4, [5], 2), seed=0)
    buf = filled(3, per_class=2, dim=4)
    with pytest.raises(StructureError):
        buf.capture_expert_logits(net, [2])


def test_sidecar_round_trip(tmp_path):
    net = Network(NetConfig(4, [5], 3), seed=0)
    buf = filled(3, per_class=30, dim=4)
    buf.capture_expert_logits(net, [0, 1])
    path = tmp_path / "b.sclbuf"
    buf.dump(path)
    assert path.read_bytes()[:8] == BUF_MAGIC
    back = ReplayBuffer.restore(path)
    assert len(back) == len(buf) and back.class_task == buf.class_task and back.seen == buf.seen
    for a, b in zip(buf.entries(), back.entries()):
        assert a.uid == b.uid and a.label == b.label and a.task_id == b.task_id
        np.testing.assert_array_equal(a.x.astype(np.float32), b.x)
        if a.expert_logits is None:
            assert b.expert_logits is None
        else:
            np.testing.assert_array_equal(a.expert_logits.astype(np.float32), b.expert_logits)
    # admission continues identically after restore
    more = np.random.default_rng(0).normal(size=(40, 4))
    buf.admit_many(more, [2] * 40, 0)
    back.admit_many(more, [2] * 40, 0)
    assert [e.uid for e in buf.entries([2])] == [e.uid for e in back.entries([2])]


def test_sidecar_rejects_damage(tmp_path):
    buf = filled(2, per_class=4)
    path = tmp_path / "b.sclbuf"
    buf.dump(path)
    blob = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + blob[8:])
    (tmp_path / "ver").write_bytes(blob[:8] + (9).to_bytes(4, "little") + blob[12:])
    (tmp_path / "trunc").write_bytes(blob[:-4])
    (tmp_path / "short").write_bytes(blob[:5])
    for name in ("magic", "ver", "short"):
        with pytest.raises(CheckpointFormatError):
            ReplayBuffer.restore(tmp_path / name)
    with pytest.raises(CheckpointCorruptError):
        ReplayBuffer.restore(tmp_path / "trunc")


def test_gather_shapes():
    buf = filled(2, per_class=3)
    X, y, logits, cls = gather(buf.entries())
    assert X.shape == (6, 4) and y.tolist() == [0, 0, 0, 1, 1, 1]
    assert logits == [None] * 6 and cls == [None] * 6
    assert gather([])[0].shape == (0, 0)


def _kernel_inputs(seed):
    rng = np.random.default_rng(seed)
    n_cls = int(rng.integers(2, 8))
    sizes = rng.integers(1, 12, size=n_cls)
    class_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    total = int(class_offsets[-1])
    split = int(rng.integers(1, n_cls))
    group_classes = np.arange(n_cls, dtype=np.int64)
    group_offsets = np.array([0, split, n_cls], dtype=np.int64)
    cumw = np.cumsum(rng.uniform(0.2, 2.0, size=2))
    return (cumw, group_offsets, group_classes, class_offsets,
            np.arange(total, dtype=np.int64), np.arange(total, dtype=np.int64), total)


@pytest.mark.skipif(_backend.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("seed", range(8))
def test_compiled_and_python_kernels_agree(seed):
    fast, slow = _backend.kernels, _backend.python_kernels
    cumw, goff, gcls, coff, cslots, suid, total = _kernel_inputs(seed)
    outs = []
    for mod in (fast, slow):
        rng = np.array([seed * 7919 + 1], dtype=np.uint64)
        last = np.full(total, _backend.NEVER, dtype=np.int64)
        out = np.empty(500, dtype=np.int64)
        pos, relaxed = mod.draw_entries(cumw, goff, gcls, coff, cslots, suid, last, rng,
                                        0, max(total - 2, 0), 500, out)
        res = mod.reservoir_slots(17, 20, 300, rng)
        outs.append((out.tolist(), pos, relaxed, last.tolist(), res.tolist(), int(rng[0])))
    assert outs[0] == outs[1]


def test_random_doubles_in_unit_interval():
    rng = np.array([42], dtype=np.uint64)
    u = _backend.python_kernels.random_doubles(rng, 1000)
    assert u.min() >= 0.0 and u.max() < 1.0 and int(rng[0]) != 42
