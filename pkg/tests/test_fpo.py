import numpy as np
import pytest

from core import autodiff as ad
from core.errors import InvariantViolation
from core.fpo import (
    ClientObjectives,
    FreezeSchedule,
    ServerObjectives,
    balanced_batch,
    is_frozen,
    matched_compression,
    multi_task_loss,
    sample_batch,
    weighted,
)
from core.tasks import TaskKind
from core.trajectory import SpatioTemporalPoint, Trajectory


# ---------- 冻结调度 ----------
def test_period_two_alternates_fresh_and_frozen():
    schedule = FreezeSchedule(2)
    assert [is_frozen(r, schedule) for r in range(5)] == [False, True, False, True, False]


def test_period_one_never_freezes():
    assert not any(is_frozen(r, FreezeSchedule(1)) for r in range(10))


def test_round_zero_is_always_fresh():
    for period in (1, 2, 3, 7):
        assert not is_frozen(0, FreezeSchedule(period))
    assert [is_frozen(r, FreezeSchedule(3)) for r in range(4)] == [False, True, True, False]


def test_schedule_validation():
    with pytest.raises(InvariantViolation):
        FreezeSchedule(0)
    with pytest.raises(InvariantViolation):
        is_frozen(-1, FreezeSchedule(2))


# ---------- 目标函数 ----------
def test_multi_task_loss_sums_configured_tasks():
    losses = {TaskKind.NF: 0.5, TaskKind.SPD: 0.25}
    assert multi_task_loss(losses) == pytest.approx(0.75)
    assert multi_task_loss(losses, [TaskKind.NF]) == pytest.approx(0.5)
    assert multi_task_loss(losses, [TaskKind.NF, TaskKind.TSim]) == pytest.approx(0.5)
    with pytest.raises(InvariantViolation):
        multi_task_loss({})
    with pytest.raises(InvariantViolation):
        multi_task_loss(losses, [TaskKind.AD])


def test_multi_task_loss_keeps_the_graph():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    total = multi_task_loss({TaskKind.NF: ad.sum(x), TaskKind.SPD: 0.5})
    assert isinstance(total, ad.Tensor)
    assert total.item() == pytest.approx(3.5)
    np.testing.assert_allclose(ad.backward(total).of(x), [1.0, 1.0])


def test_weighted_scales_only_when_needed():
    loss = ad.sum(ad.Tensor([2.0], requires_grad=True))
    assert weighted(loss, 1.0) is loss
    assert weighted(loss, 0.5).item() == pytest.approx(1.0)


def test_objective_weights():
    assert ClientObjectives.from_weights([1, 0.5, 2]) == ClientObjectives(1.0, 0.5, 2.0)
    assert ServerObjectives.from_weights([0, 1]).forward_kl == 0.0
    with pytest.raises(InvariantViolation):
        ClientObjectives(-1.0)
    with pytest.raises(InvariantViolation):
        ServerObjectives(1.0, -0.1)


# ---------- 抽样 ----------
def test_sample_batch():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_batch(4, 10, rng), np.arange(4))
    idx = sample_batch(100, 10, rng)
    assert idx.size == 10 and len(set(idx.tolist())) == 10
    assert list(idx) == sorted(idx)


def test_balanced_batch_lifts_minority_class():
    labels = np.array([0] * 98 + [1] * 2)
    idx = balanced_batch(labels, 4000, np.random.default_rng(1))
    share = float(np.mean(labels[idx] == 1))
    assert 0.45 < share < 0.55
    assert balanced_batch(np.array([], dtype=np.int64), 8, np.random.default_rng(1)).size == 0


# ---------- 匹配压缩率 ----------
def test_matched_compression_keeps_endpoints_and_top_points():
    pts = [SpatioTemporalPoint(116.3 + 0.001 * i, 39.9, i) for i in range(6)]
    traj = Trajectory("t", "u", pts)
    keep = {0: 0.0, 1: 0.1, 2: 0.9, 3: 0.2, 4: 0.8, 5: 0.0}
    out = matched_compression(traj, keep, 4)
    assert [p.t for p in out.points] == [0, 2, 4, 5]
    assert len(matched_compression(traj, keep, 1)) == 2
    assert len(matched_compression(traj, keep, 99)) == 6
