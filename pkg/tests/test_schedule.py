import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scalecl.buffer import ReplayBuffer, RetrievalState
from scalecl.losses import LossConfig
from scalecl.net import NetConfig, Network
from scalecl.schedule import (
    BudgetLedger,
    ConsolidationPlan,
    ReplaySchedule,
    ScheduleError,
    compose_batch,
    consolidation_budget,
    round_half_up,
    run_consolidation,
    saved_replay,
    simulate_budget,
    trp,
)
from scalecl.training import OptimConfig


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999, 7.0)] == [1, 2, 3, 2, 7]


def test_compose_batch_examples():
    assert compose_batch(ReplaySchedule(1.0, 32), 10) == (32, 32)
    assert compose_batch(ReplaySchedule(0.25, 32), 10) == (32, 8)
    assert compose_batch(ReplaySchedule(0.0, 32), 0) == (32, 0)
    with pytest.raises(ScheduleError):
        compose_batch(ReplaySchedule(0.5, 32), 0)
    with pytest.raises(ValueError):
        ReplaySchedule(-0.1, 32)


def test_fixed_total_batch_split():
    assert ReplaySchedule.from_total(32, 1.0).batch_task_samples == 16
    assert ReplaySchedule.from_total(32, 0.0).batch_task_samples == 32
    assert ReplaySchedule.from_total(32, 0.25).batch_task_samples == 26


@settings(max_examples=40, deadline=None)
@given(rr=st.floats(0, 3), sizes=st.lists(st.integers(1, 40), min_size=1, max_size=60))
def test_running_replay_total_tracks_ratio(rr, sizes):
    s = ReplaySchedule(rr, 8)
    total = sum(compose_batch(s, 1, n)[1] for n in sizes)
    assert total == round_half_up(rr * sum(sizes))


def test_saved_replay_and_conservation():
    led = BudgetLedger()
    led.record_task(1, 10_000, 2_500)
    led.record_task(2, 10_000, 10_000)
    led.record_task(3, 10_000, 0)
    assert [saved_replay(led, t) for t in (1, 2, 3)] == [7_500, 0, 10_000]
    for b in led.tasks.values():
        assert b.n_replay_task + b.n_saved == b.n_task


def test_consolidation_budget_examples():
    assert consolidation_budget(ConsolidationPlan(0.0), 7_500) == 0
    assert consolidation_budget(ConsolidationPlan(1.0), 7_500) == 7_500
    assert consolidation_budget(ConsolidationPlan(0.4), 7_500) == 3_000
    with pytest.raises(ValueError):
        ConsolidationPlan(1.2)
    with pytest.raises(ValueError):
        consolidation_budget(ConsolidationPlan(0.5), -1)


def test_trp_and_empty_ledger():
    led = BudgetLedger()
    with pytest.raises(ValueError):
        trp(led)
    led.record_task(1, 1000, 250)
    led.record_consolidation(1, 750)
    assert trp(led) == 100.0
    rows = led.rows()
    assert rows[0]["n_saved"] == 750 and rows[0]["n_consol"] == 750 and rows[0]["trp"] == 100.0


@pytest.mark.parametrize("rr,csr,want", [
    (0.1, 0.39, 45.0), (0.25, 0.27, 45.0), (0.1, 0.50, 55.0), (0.25, 0.40, 55.0),
    (0.5, 0.10, 55.0), (0.25, 1.0, 100.0), (1.0, 0.0, 100.0),
])
def test_simulated_trp_matches_table(rr, csr, want):
    assert abs(simulate_budget(rr, csr).trp() - want) <= 0.5


@settings(max_examples=40, deadline=None)
@given(rr=st.floats(0, 1), csr=st.floats(0, 1))
def test_simulated_trp_closed_form(rr, csr):
    got = simulate_budget(rr, csr, n_tasks=5).trp()
    assert abs(got - 100 * (rr + csr * (1 - rr))) <= 0.5


def test_simulated_cil_first_task_without_replay():
    led = simulate_budget(1.0, 0.0, first_replay_task=2)
    assert led.tasks[1].n_replay_task == 0
    assert led.trp() == pytest.approx(95.0)


def test_deferred_consolidation_keeps_total():
    a = simulate_budget(0.25, 0.4, every_k_tasks=1)
    b = simulate_budget(0.25, 0.4, every_k_tasks=3)
    assert abs(a.totals()["n_consol"] - b.totals()["n_consol"]) <= 20
    assert [t for t, r in b.tasks.items() if r.n_consol] == [3, 6, 9, 12, 15, 18, 20]


def _consolidation_setup(n_classes=6, seed=0):
    rng = np.random.default_rng(seed)
    classes = list(range(n_classes))
    net = Network(NetConfig(4, [6], n_classes), seed=seed, classes=classes)
    buf = ReplayBuffer(20, seed=seed)
    buf.register_classes(1, classes)
    y = np.repeat(classes, 20)
    buf.admit_many(rng.normal(size=(len(y), 4)) + y[:, None], y, 1)
    buf.capture_expert_logits(net, classes)
    return net, buf


def test_consolidation_zero_budget_is_noop():
    net, buf = _consolidation_setup()
    before = net.param_set()
    led = BudgetLedger()
    led.record_task(1, 100, 25)
    out = run_consolidation(net, buf, ConsolidationPlan(0.4), 0, LossConfig(),
                            state=RetrievalState(), optim=OptimConfig(), ledger=led, task=1)
    assert out.param_set().equals(before)
    assert led.rows()[0]["n_consol"] == 0


def test_consolidation_consumes_budget_in_94_batches():
    net, buf = _consolidation_setup()
    led = BudgetLedger()
    led.record_task(1, 10_000, 2_500)
    steps, trace = [], []
    run_consolidation(net, buf, ConsolidationPlan(0.4, batch_size=32), 3_000, LossConfig(),
                      state=RetrievalState(seed=3), optim=OptimConfig(), ledger=led, task=1,
                      on_step=lambda m: steps.append(1), class_trace=trace)
    assert len(steps) == 94
    assert abs(len(trace) - 3_000) <= 1
    assert abs(led.tasks[1].n_consol - 3_000) <= 1
    assert stats.chisquare(np.bincount(trace, minlength=6)).pvalue > 0.01


def test_consolidation_requires_class_coverage():
    net, buf = _consolidation_setup()
    with pytest.raises(ScheduleError):
        run_consolidation(net, buf, ConsolidationPlan(1.0), 64, LossConfig(), state=RetrievalState(),
                          optim=OptimConfig(), required_classes=[0, 1, 99])


def test_consolidation_with_lora_merges_adapters():
    net, buf = _consolidation_setup()
    body = {k: v.copy() for k, v in net.params.items()}
    out = run_consolidation(net, buf, ConsolidationPlan(1.0), 320, LossConfig(), state=RetrievalState(),
                            optim=OptimConfig(lr=0.05), lora_rank=2, seed=1)
    assert not out.adapters
    assert any(not np.array_equal(out.params[k], v) for k, v in body.items() if k.startswith("fc"))


def test_consolidation_keeps_best_chunk():
    net, buf = _consolidation_setup()
    scores = iter([0.2, 0.9, 0.1, 0.3])
    snaps = []

    def val(m):
        snaps.append(m.param_set())
        return next(scores)

    out = run_consolidation(net, buf, ConsolidationPlan(1.0, chunks=4), 640, LossConfig(),
                            state=RetrievalState(), optim=OptimConfig(lr=0.05), val_fn=val)
    assert out.param_set().equals(snaps[1])
