import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalecl.losses import (
    LossConfig,
    batch_loss,
    cross_entropy,
    current_task_loss,
    kd_term,
    replay_kd_loss,
    standardize_logits,
)
from scalecl.params import StructureError


def ce_oracle(row, label):
    m = max(row)
    return -(row[label] - m - math.log(sum(math.exp(v - m) for v in row)))


def fd(fn, z, step=1e-5):
    g = np.zeros_like(z)
    for i in np.ndindex(z.shape):
        old = z[i]
        z[i] = old + step
        up = fn(z)
        z[i] = old - step
        down = fn(z)
        z[i] = old
        g[i] = (up - down) / (2 * step)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-7))


def test_config_validation():
    for bad in (dict(kd_temperature=0), dict(standardize_epsilon=0), dict(replay_scale=-1), dict(decouple_weight=1.5)):
        with pytest.raises(ValueError):
            LossConfig(**bad)


def test_cross_entropy_matches_log_sum_exp(rng):
    z = rng.normal(scale=4, size=(9, 7))
    y = rng.integers(0, 7, size=9)
    want = np.mean([ce_oracle(list(r), int(t)) for r, t in zip(z, y)])
    assert abs(cross_entropy(z, y)[0] - want) < 1e-10


def test_current_task_loss_reductions(rng):
    z = rng.normal(size=(5, 8))
    y = rng.integers(2, 5, size=5)
    plain = cross_entropy(z, y)
    got = current_task_loss(z, y, (2, 5), LossConfig(decouple_weight=0.0))
    assert got[0] == pytest.approx(plain[0], abs=1e-12)
    np.testing.assert_allclose(got[1], plain[1], atol=1e-15)
    single = current_task_loss(z, np.full(5, 3), (3, 4), LossConfig(decouple_weight=1.0))
    assert single[0] == 0.0 and np.all(single[1] == 0.0)


def test_current_task_loss_value_oracle(rng):
    z = rng.normal(size=(6, 10))
    y = rng.integers(4, 10, size=6)
    w = 0.3
    want = np.mean([w * ce_oracle(list(r[4:]), int(t) - 4) + (1 - w) * ce_oracle(list(r), int(t)) for r, t in zip(z, y)])
    got, _ = current_task_loss(z, y, (4, 10), LossConfig(decouple_weight=w))
    assert abs(got - want) < 1e-10 and got >= 0


def test_current_task_loss_label_outside_range():
    with pytest.raises(ValueError):
        current_task_loss(np.zeros((1, 4)), np.array([0]), (1, 3), LossConfig())


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), w=st.floats(0, 1))
def test_current_task_loss_gradient(seed, w):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(4, 6))
    y = rng.integers(3, 6, size=4)
    cfg = LossConfig(decouple_weight=w)
    _, g = current_task_loss(z, y, (3, 6), cfg)
    assert rel_err(g, fd(lambda q: current_task_loss(q, y, (3, 6), cfg)[0], z)) < 1e-4


def test_standardize_examples():
    np.testing.assert_allclose(standardize_logits([1.0, 2.0, 3.0]), [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], atol=1e-12)
    assert np.all(standardize_logits([4.0, 4.0, 4.0]) == 0.0)
    with pytest.raises(ValueError):
        standardize_logits([1.0])
    u = standardize_logits(np.random.default_rng(0).normal(size=(3, 9)))
    np.testing.assert_allclose(u.mean(axis=1), 0, atol=1e-12)
    np.testing.assert_allclose(u.std(axis=1), 1, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    z=st.lists(st.floats(-50, 50), min_size=2, max_size=12).filter(lambda v: np.std(v) > 1e-3),
    a=st.floats(0.01, 100),
    b=st.floats(-100, 100),
)
def test_standardize_affine_invariance_and_idempotence(z, a, b):
    z = np.array(z)
    u = standardize_logits(z)
    np.testing.assert_allclose(standardize_logits(a * z + b), u, atol=1e-9)
    np.testing.assert_allclose(standardize_logits(u), u, atol=1e-9)


def test_self_distillation_kd_is_zero(rng):
    z = rng.normal(size=8)
    assert abs(kd_term(z, z[:5], LossConfig())) < 1e-14
    loss, _ = replay_kd_loss(z[None, :], [z[:5].copy()], np.array([1]), LossConfig())
    assert loss == pytest.approx(cross_entropy(z[None, :], np.array([1]))[0], abs=1e-12)


def test_kd_temperature_limit(rng):
    # T^2 * KL tends to half the variance of the standardized logit gap
    s, t = rng.normal(size=6), rng.normal(size=6)
    d = standardize_logits(t) - standardize_logits(s)
    limit = 0.5 * np.mean((d - d.mean()) ** 2)
    vals = {T: kd_term(s, t, LossConfig(kd_temperature=T)) for T in (1.0, 10.0, 100.0)}
    raw = {T: v / T**2 for T, v in vals.items()}
    assert raw[1.0] > raw[10.0] > raw[100.0] > 0
    assert raw[100.0] < 1e-3 * raw[1.0]
    assert abs(vals[100.0] - limit) < 1e-2 * limit
    # the remaining gap shrinks at least linearly in 1/T
    assert abs(vals[100.0] - limit) < 0.2 * abs(vals[10.0] - limit)


def test_kd_nonnegative(rng):
    for _ in range(50):
        k = int(rng.integers(2, 9))
        assert kd_term(rng.normal(size=k + 2), rng.normal(size=k), LossConfig()) >= -1e-15


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), T=st.floats(0.5, 5))
def test_replay_kd_gradient_with_grown_head(seed, T):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 7))
    stored = [rng.normal(size=int(rng.integers(2, 8))) for _ in range(5)]
    y = rng.integers(0, 7, size=5)
    cfg = LossConfig(kd_temperature=T)
    _, g = replay_kd_loss(z, stored, y, cfg)
    assert rel_err(g, fd(lambda q: replay_kd_loss(q, stored, y, cfg)[0], z)) < 1e-4


def test_replay_kd_gradient_with_column_map(rng):
    z = rng.normal(size=(3, 8))
    cols = [np.array([5, 1, 6]), None, np.array([0, 7])]
    stored = [rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)]
    y = np.array([5, 2, 7])
    cfg = LossConfig()
    loss, g = replay_kd_loss(z, stored, y, cfg, cols)
    want = cross_entropy(z, y)[0] + np.mean(
        [kd_term(z[0, [5, 1, 6]], stored[0], cfg), kd_term(z[1], stored[1], cfg), kd_term(z[2, [0, 7]], stored[2], cfg)]
    )
    assert loss == pytest.approx(want, abs=1e-12)
    assert rel_err(g, fd(lambda q: replay_kd_loss(q, stored, y, cfg, cols)[0], z)) < 1e-4


def test_replay_kd_shape_errors():
    cfg = LossConfig()
    with pytest.raises(StructureError):
        replay_kd_loss(np.zeros((1, 3)), [np.zeros(4)], np.array([0]), cfg)
    with pytest.raises(StructureError):
        replay_kd_loss(np.zeros((2, 3)), [np.zeros(3)], np.array([0, 1]), cfg)
    with pytest.raises(StructureError):
        replay_kd_loss(np.zeros((1, 3)), [np.zeros(2)], np.array([0]), cfg, [np.array([0, 1, 2])])


def test_constant_teacher_gradient_is_finite():
    z = np.array([[1.0, 1.0, 1.0, 2.0]])
    loss, g = replay_kd_loss(z, [np.zeros(3)], np.array([3]), LossConfig())
    assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_batch_loss_components(rng):
    cfg = LossConfig()
    zt, zr = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
    stored = [rng.normal(size=4)]
    task = (zt, np.array([5]), (4, 6))
    rep = (zr, stored, np.array([2]))
    total, dt, dr = batch_loss(task, rep, cfg)
    parts = current_task_loss(*task, cfg)[0] + replay_kd_loss(zr, stored, np.array([2]), cfg)[0]
    assert total == pytest.approx(parts, abs=1e-12)
    assert dt.shape == zt.shape and dr.shape == zr.shape


def test_batch_loss_reductions(rng):
    task = (rng.normal(size=(3, 6)), np.array([4, 5, 4]), (4, 6))
    pure = current_task_loss(*task, LossConfig())[0]
    rep = (rng.normal(size=(2, 6)), [rng.normal(size=4)] * 2, np.array([0, 1]))
    assert batch_loss(task, rep, LossConfig(replay_scale=0.0))[0] == pure
    assert batch_loss(task, (np.zeros((0, 6)), [], np.zeros(0, dtype=int)), LossConfig())[0] == pure
    assert batch_loss(task, None, LossConfig())[0] == pure
    only_replay, dt, _ = batch_loss((np.zeros((0, 6)), np.zeros(0, dtype=int), (4, 6)), rep, LossConfig())
    assert only_replay == pytest.approx(replay_kd_loss(*rep, LossConfig())[0]) and dt.shape == (0, 6)
