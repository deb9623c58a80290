import math

import numpy as np
import pytest

from core.errors import EmptyNetwork, LengthMismatch, NotSubsequence, UnbracketedGap
from core.geo import EARTH_RADIUS_M, meters_per_degree, offset_degrees
from core.tasks import (
    MetricReport,
    RoadNetwork,
    RoadSegment,
    TaskKind,
    f1_score,
    gap_times,
    label_tmi,
    label_tul,
    load_road_network,
    noise_filter_labels,
    oracle_anomaly,
    oracle_impute,
    oracle_map_match,
    oracle_noise_filter,
    oracle_recover,
    oracle_segment,
    oracle_simplify,
    oracle_stay_points,
    save_road_network,
    sed,
    simplify_labels,
    stay_point_labels,
    synth_road_network,
)
from core.trajectory import CorruptionKind, CorruptionSpec, SpatioTemporalPoint, Trajectory, corrupt

LAT0 = 39.95


def _traj(coords, times=None):
    times = times if times is not None else range(len(coords))
    return Trajectory("t", "u", [SpatioTemporalPoint(lon, lat, t) for (lon, lat), t in zip(coords, times)])


def _walk(n, speed, dt=1, lon0=116.35):
    """沿纬线匀速行进"""
    coords = [offset_degrees(lon0, LAT0, speed * dt * i, 0.0, LAT0) for i in range(n)]
    return _traj(coords, [i * dt for i in range(n)])


# ---------- 停留点 ----------
def test_identical_points_form_one_stay_point():
    traj = _traj([(116.35, LAT0)] * 7, [i * 100 for i in range(7)])
    stays = oracle_stay_points(traj, 100.0, 300.0).points
    assert len(stays) == 1
    assert stays[0].lon == pytest.approx(116.35)
    assert stays[0].lat == pytest.approx(LAT0)
    assert stays[0].t == 300


def test_constant_speed_line_has_no_stay_points():
    assert oracle_stay_points(_walk(100, 10.0, dt=5), 100.0, 300.0).points == ()


def test_cluster_then_jump_gives_one_centroid():
    offsets = [(0, 0), (3, 2), (-2, 4), (1, -3), (4, 1)]
    coords = [offset_degrees(116.35, LAT0, dx, dy, LAT0) for dx, dy in offsets]
    coords.append(offset_degrees(116.35, LAT0, 1000.0, 0.0, LAT0))
    traj = _traj(coords, [0, 150, 300, 450, 600, 700])
    stays = oracle_stay_points(traj, 100.0, 300.0).points
    assert len(stays) == 1
    assert stays[0].lon == pytest.approx(sum(c[0] for c in coords[:5]) / 5)
    assert stays[0].lat == pytest.approx(sum(c[1] for c in coords[:5]) / 5)


def test_stay_point_labels_mark_the_whole_run():
    xs = [0.0, 150.0, 300.0, 450.0, 450.0, 450.0, 450.0, 600.0, 750.0]
    coords = [offset_degrees(116.35, LAT0, x, 0.0, LAT0) for x in xs]
    traj = _traj(coords, [0, 10, 20, 30, 130, 230, 330, 340, 350])
    flags = stay_point_labels(traj, 100.0, 300.0)
    assert flags == (False, False, False, True, True, True, True, False, False)


def test_stay_point_labels_need_the_full_duration():
    xs = [0.0, 150.0, 150.0, 150.0, 300.0]
    coords = [offset_degrees(116.35, LAT0, x, 0.0, LAT0) for x in xs]
    traj = _traj(coords, [0, 10, 110, 209, 220])
    assert not any(stay_point_labels(traj, 100.0, 200.0))


# ---------- 噪声过滤 ----------
def test_noise_filter_keeps_clean_walk():
    out = oracle_noise_filter(_walk(10, 5.0), 50.0)
    assert all(out.keep)


def test_noise_filter_drops_teleported_point():
    traj = _walk(5, 5.0)
    pts = list(traj.points)
    lon, lat = offset_degrees(pts[2].lon, pts[2].lat, 0.0, 10_000.0, LAT0)
    pts[2] = SpatioTemporalPoint(lon, lat, pts[2].t)
    out = oracle_noise_filter(Trajectory("t", "u", pts), 50.0)
    assert out.keep == (True, True, False, True, True)
    assert len(out.trajectory) == 4


def test_noise_filter_two_points_unchanged():
    traj = _walk(2, 500.0)
    assert oracle_noise_filter(traj, 50.0).keep == (True, True)


# ---------- 简化 ----------
def test_simplify_epsilon_zero_keeps_everything():
    traj = _traj([(116.30 + 0.001 * i, LAT0 + 0.0005 * (i % 3)) for i in range(12)])
    assert all(simplify_labels(traj, 0.0))


def test_simplify_collinear_keeps_endpoints():
    traj = _walk(3, 10.0)
    assert simplify_labels(traj, 1.0) == (True, False, True)


def test_simplify_huge_epsilon_keeps_endpoints():
    traj = _traj([(116.30 + 0.001 * i, LAT0 + 0.0005 * (i % 3)) for i in range(12)])
    out = oracle_simplify(traj, 1e12)
    assert len(out.trajectory) == 2
    assert out.trajectory.points[0] == traj.points[0]
    assert out.trajectory.points[-1] == traj.points[-1]


def _random_walk(rng, n):
    steps = rng.normal(0.0, 60.0, (n, 2)).cumsum(axis=0)
    coords = [offset_degrees(116.35, LAT0, float(x), float(y), LAT0) for x, y in steps]
    return _traj(coords, np.cumsum(rng.integers(1, 30, n)).tolist())


def test_simplified_sed_never_decreases_with_epsilon():
    rng = np.random.default_rng(11)
    for _ in range(300):
        traj = _random_walk(rng, int(rng.integers(4, 13)))
        seds = [sed(oracle_simplify(traj, float(eps)).trajectory, traj) for eps in range(0, 405, 5)]
        assert all(b >= a for a, b in zip(seds, seds[1:])), seds


def test_simplify_is_never_worse_than_endpoints_only():
    rng = np.random.default_rng(12)
    for _ in range(200):
        traj = _random_walk(rng, int(rng.integers(4, 13)))
        ends = Trajectory("t", "u", [traj.points[0], traj.points[-1]])
        for eps in (0.0, 20.0, 50.0, 100.0, 200.0):
            assert sed(oracle_simplify(traj, eps).trajectory, traj) <= sed(ends, traj)


# ---------- 地图匹配 ----------
def test_map_match_point_on_segment():
    net = RoadNetwork((RoadSegment(0, 116.30, LAT0, 116.40, LAT0),))
    out = oracle_map_match(_traj([(116.35, LAT0)]), net)
    assert out.segment_ids == (0,)
    assert out.trajectory.points[0].lon == pytest.approx(116.35)
    assert out.trajectory.points[0].lat == pytest.approx(LAT0)


def test_map_match_tie_goes_to_lower_id():
    net = RoadNetwork((RoadSegment(7, 0.0, 1.0, 1.0, 1.0), RoadSegment(3, 0.0, -1.0, 1.0, -1.0)))
    out = oracle_map_match(_traj([(0.5, 0.0)]), net)
    assert out.segment_ids == (3,)


def test_map_match_nearest_segment():
    net = RoadNetwork(((1, 0.0, 1.0, 1.0, 1.0), (2, 0.0, 2.0, 1.0, 2.0)))
    assert oracle_map_match(_traj([(0.0, 0.0)]), net).segment_ids == (1,)


def test_map_match_empty_network():
    with pytest.raises(EmptyNetwork):
        oracle_map_match(_traj([(0.0, 0.0)]), RoadNetwork(()))


# ---------- 补全 / 恢复 ----------
def test_impute_midpoint_and_quarter():
    mid = oracle_impute(_traj([(0.0, 0.0), (2.0, 2.0)], [0, 2]), missing_times=[1])
    p = mid.trajectory.points[1]
    assert (p.lon, p.lat, p.t) == (1.0, 1.0, 1)
    assert mid.inserted == (False, True, False)
    quarter = oracle_impute(_traj([(0.0, 0.0), (2.0, 2.0)], [0, 4]), missing_times=[1])
    q = quarter.trajectory.points[1]
    assert (q.lon, q.lat) == (0.5, 0.5)


def test_impute_without_gaps_is_identity():
    traj = _traj([(0.0, 0.0), (1.0, 1.0)], [0, 10])
    out = oracle_impute(traj, interval=10)
    assert out.trajectory == traj
    assert not any(out.inserted)


def test_impute_unbracketed_gap():
    with pytest.raises(UnbracketedGap):
        oracle_impute(_traj([(0.0, 0.0), (1.0, 1.0)], [0, 10]), missing_times=[20])


def test_gap_times_from_interval():
    assert gap_times(_traj([(0, 0), (1, 1), (2, 2)], [0, 10, 40]), 10) == [20, 30]


def test_recover_sparse_trajectory_to_regular_interval():
    sparse = _walk(5, 10.0, dt=30)
    out = oracle_recover(sparse, 10)
    dense = _walk(13, 10.0, dt=10)
    assert out.trajectory.times().tolist() == list(range(0, 130, 10))
    assert out.inserted == tuple(t % 30 != 0 for t in range(0, 130, 10))
    for got, want in zip(out.trajectory.points, dense.points):
        assert got.lon == pytest.approx(want.lon, abs=1e-9)
        assert got.lat == pytest.approx(want.lat, abs=1e-9)


def test_recover_regular_trajectory_is_unchanged():
    traj = _walk(6, 5.0, dt=10)
    out = oracle_recover(traj, 10)
    assert out.trajectory == traj
    assert out.inserted == (False,) * 6


# ---------- 分段 / 异常 / 出行方式 ----------
def test_segment_without_stay_points_is_one_segment():
    out = oracle_segment(_walk(5, 5.0), [])
    assert set(out.segment_ids) == {0}
    assert out.boundaries == ()


def test_segment_splits_at_stay_point_time():
    traj = _traj([(116.3, LAT0)] * 5, [0, 10, 20, 30, 40])
    out = oracle_segment(traj, [SpatioTemporalPoint(116.3, LAT0, 25)])
    assert out.boundaries == (3,)
    assert out.segment_ids == (0, 0, 0, 1, 1)


def test_anomaly_zero_deviation():
    traj = _walk(5, 5.0)
    assert oracle_anomaly(traj, traj.points, 50.0).label == 0


def test_tmi_ten_metres_per_second_is_bus():
    assert label_tmi(_walk(20, 10.0, dt=10)).label == 2


def test_tul_label_is_the_user_index():
    traj = Trajectory("t", "user-002", _walk(3, 5.0).points)
    assert label_tul(traj, {"user-000": 0, "user-002": 2}).label == 2
    with pytest.raises(KeyError):
        label_tul(traj, {"user-000": 0})


# ---------- 指标 ----------
def test_f1_perfect_and_all_wrong():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_score([0, 1], [1, 0]) == 0.0


def test_f1_hand_value():
    # TP=1, FP=1, FN=1
    assert f1_score([1, 0, 1], [1, 1, 0]) == pytest.approx(0.5)


def test_f1_macro_symmetric_under_relabel():
    gold, pred = [0, 1, 2, 2], [0, 2, 2, 1]
    perm = {0: 1, 1: 2, 2: 0}
    relabel = lambda xs: [perm[x] for x in xs]
    assert f1_score(pred, gold, "macro") == pytest.approx(f1_score(relabel(pred), relabel(gold), "macro"))


def test_f1_length_mismatch():
    with pytest.raises(LengthMismatch):
        f1_score([1], [1, 0])


def test_sed_identity_and_collinear():
    traj = _walk(6, 5.0)
    assert sed(traj, traj) == 0.0
    ends = Trajectory("t", "u", [traj.points[0], traj.points[-1]])
    assert sed(ends, traj) == pytest.approx(0.0, abs=1e-6)


def test_sed_hand_geometry():
    original = _traj([(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)], [0, 1, 2])
    simplified = Trajectory("t", "u", [original.points[0], original.points[2]])
    _, m_lat = meters_per_degree(0.0)
    assert m_lat == pytest.approx(EARTH_RADIUS_M * math.pi / 180.0)
    assert sed(simplified, original) == pytest.approx(m_lat / 3.0)


def test_sed_rejects_non_subsequence():
    original = _walk(4, 5.0)
    stranger = Trajectory("t", "u", [original.points[0], SpatioTemporalPoint(0.0, 0.0, 2), original.points[-1]])
    with pytest.raises(NotSubsequence):
        sed(stranger, original)


def test_metric_report_needs_exactly_one_value():
    with pytest.raises(ValueError):
        MetricReport(TaskKind.NF)
    assert MetricReport(TaskKind.NF, f1=0.5, support=3).to_dict()["f1"] == 0.5


# ---------- 路网 ----------
def test_synth_road_network_counts_and_csv(tmp_path):
    net = synth_road_network((116.3, 39.9, 116.4, 39.98), 2, 3)
    assert len(net) == 3 * 3 + 4 * 2
    path = tmp_path / "roads.csv"
    save_road_network(net, path)
    assert load_road_network(path) == net


# ---------- 污染与 oracle 对齐 ----------
# 幅度取默认污染配置的 10 倍
def test_noise_filter_recovers_injected_noise_exactly():
    traj = _walk(60, 8.5, dt=10)
    for seed in range(50):
        out, gt = corrupt(traj, CorruptionSpec(CorruptionKind.NOISE, 0.1, 8000.0, seed=seed))
        assert sum(gt.noise_flags) == 6
        assert [not k for k in noise_filter_labels(out, 40.0)] == list(gt.noise_flags)


def test_noise_picks_leave_two_clean_points_between():
    traj = _walk(40, 8.5, dt=10)
    for seed in range(50):
        _, gt = corrupt(traj, CorruptionSpec(CorruptionKind.NOISE, 0.3, 500.0, seed=seed))
        picks = [i for i, flag in enumerate(gt.noise_flags) if flag]
        assert all(b - a >= 3 for a, b in zip(picks, picks[1:]))


def test_stay_labels_match_injected_stays():
    traj = _walk(30, 15.0, dt=10)
    for seed in range(20):
        out, gt = corrupt(traj, CorruptionSpec(CorruptionKind.STAY_INJECT, 0.1, 6000.0, seed=seed))
        assert len(gt.stays) == 3
        expected = [any(start <= p.t <= end for start, end in gt.stays) for p in out.points]
        assert list(stay_point_labels(out, 100.0, 300.0)) == expected


def test_anomaly_oracle_flags_injected_detours():
    traj = _walk(30, 15.0, dt=10)
    for seed in range(20):
        out, gt = corrupt(traj, CorruptionSpec(CorruptionKind.ANOMALY_DETOUR, 0.1, 3000.0, seed=seed))
        assert gt.anomaly
        assert oracle_anomaly(out, traj.points, 150.0).label == 1
    out, gt = corrupt(traj, CorruptionSpec(CorruptionKind.ANOMALY_DETOUR, 0.1, 0.0, seed=1))
    assert not gt.anomaly
    assert oracle_anomaly(out, traj.points, 150.0).label == 0


def test_impute_restores_dropped_points():
    traj = _walk(30, 15.0, dt=10)
    for seed in range(20):
        out, gt = corrupt(traj, CorruptionSpec(CorruptionKind.DROP, 0.2, 0.0, seed=seed))
        dropped = {p.t for _, p in gt.dropped}
        for filled in (oracle_impute(out, missing_times=sorted(dropped)), oracle_impute(out, interval=10)):
            assert filled.inserted == tuple(p.t in dropped for p in traj.points)
            for got, want in zip(filled.trajectory.points, traj.points):
                assert got.t == want.t
                assert got.lon == pytest.approx(want.lon, abs=1e-9)
                assert got.lat == pytest.approx(want.lat, abs=1e-9)
