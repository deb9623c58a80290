"""轨迹数据准备任务 - 任务定义、经典 oracle 算法与评价指标"""

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn import metrics

from core.errors import (
    EmptyNetwork,
    LengthMismatch,
    NotSubsequence,
    ParseError,
    UnbracketedGap,
)
from core.geo import distance_m, meters_per_degree, point_segment_distance, speed_mps
from core.trajectory import SpatioTemporalPoint, Trajectory


class TaskKind(Enum):
    AD = "AD"        # 异常检测
    TI = "TI"        # 轨迹补全
    NF = "NF"        # 噪声过滤
    SPD = "SPD"      # 停留点检测
    MM = "MM"        # 地图匹配
    TUL = "TUL"      # 轨迹-用户关联
    TMI = "TMI"      # 出行方式识别
    TSim = "TSim"    # 轨迹简化
    TSeg = "TSeg"    # 轨迹分段
    TR = "TR"        # 轨迹恢复


class OutputFormat(Enum):
    CLASSIFICATION = "classification"
    POINTS = "points"
    TRAJECTORY = "trajectory"


TASK_FORMAT: Dict[TaskKind, OutputFormat] = {
    TaskKind.AD: OutputFormat.CLASSIFICATION,
    TaskKind.TUL: OutputFormat.CLASSIFICATION,
    TaskKind.TMI: OutputFormat.CLASSIFICATION,
    TaskKind.SPD: OutputFormat.POINTS,
    TaskKind.TI: OutputFormat.TRAJECTORY,
    TaskKind.NF: OutputFormat.TRAJECTORY,
    TaskKind.TSim: OutputFormat.TRAJECTORY,
    TaskKind.TSeg: OutputFormat.TRAJECTORY,
    TaskKind.MM: OutputFormat.TRAJECTORY,
    TaskKind.TR: OutputFormat.TRAJECTORY,
}

TASK_DESCRIPTIONS: Dict[TaskKind, str] = {
    TaskKind.AD: "Decide whether the trajectory deviates significantly from typical movement.",
    TaskKind.TI: "Estimate the missing points of the trajectory.",
    TaskKind.NF: "Identify and remove irrelevant spatio-temporal points.",
    TaskKind.SPD: "Find the places where the object remains within an area for a while.",
    TaskKind.MM: "Match every point to the most probable segment in the road network.",
    TaskKind.TUL: "Link the anonymous trajectory with the user who generated it.",
    TaskKind.TMI: "Identify the travel mode: walking, biking, taking the bus or driving.",
    TaskKind.TSim: "Reduce the number of spatio-temporal points while keeping the shape.",
    TaskKind.TSeg: "Divide the trajectory into meaningful segments.",
    TaskKind.TR: "Reconstruct a complete trajectory from the sparse observations.",
}

TMI_CLASSES = ("walk", "bike", "bus", "car")
TMI_BOUNDS = (2.0, 6.0, 15.0)


# ========== 输出类型 ==========
@dataclass(frozen=True)
class Classification:
    label: int


@dataclass(frozen=True)
class Points:
    points: Tuple[SpatioTemporalPoint, ...]


@dataclass(frozen=True)
class TrajectoryOut:
    """轨迹类输出；按任务附带逐点标签"""
    trajectory: Trajectory
    keep: Optional[Tuple[bool, ...]] = None          # NF / TSim：相对输入轨迹的保留标记
    segment_ids: Optional[Tuple[int, ...]] = None    # MM：路段 id；TSeg：段序号
    boundaries: Tuple[int, ...] = ()                 # TSeg：新段起点下标
    inserted: Optional[Tuple[bool, ...]] = None      # TI / TR：插值生成的点


TaskOutput = Union[Classification, Points, TrajectoryOut]


@dataclass(frozen=True)
class RoadSegment:
    seg_id: int
    start_lon: float
    start_lat: float
    stop_lon: float
    stop_lat: float


@dataclass(frozen=True)
class RoadNetwork:
    segments: Tuple[RoadSegment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", self._normalize(self.segments))

    @staticmethod
    def _normalize(segments) -> Tuple[RoadSegment, ...]:
        out = [s if isinstance(s, RoadSegment) else RoadSegment(int(s[0]), *(float(v) for v in s[1:5]))
               for s in segments]
        return tuple(sorted(out, key=lambda s: s.seg_id))

    def __len__(self) -> int:
        return len(self.segments)


@dataclass(frozen=True)
class MetricReport:
    task: TaskKind
    f1: Optional[float] = None
    sed: Optional[float] = None
    support: int = 0
    extra: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if (self.f1 is None) == (self.sed is None):
            raise ValueError("exactly one of f1/sed must be set")

    def to_dict(self) -> dict:
        return {"task": self.task.value, "f1": self.f1, "sed": self.sed,
                "support": self.support, **{k: self.extra[k] for k in sorted(self.extra)}}


# ========== 停留点 ==========
def _local_xy(traj_points: Sequence[SpatioTemporalPoint], lat0: float) -> np.ndarray:
    mx, my = meters_per_degree(lat0)
    return np.array([[p.lon * mx, p.lat * my] for p in traj_points], dtype=np.float64)


def stay_point_runs(traj: Trajectory, dist_thresh: float, time_thresh: float) -> List[Tuple[int, int]]:
    """贪心寻找直径 ≤ dist_thresh 且持续 ≥ time_thresh 的最大连续子序列，返回闭区间下标"""
    pts = traj.points
    xy = _local_xy(pts, float(np.mean(traj.lats())))
    runs = []
    i, n = 0, len(pts)
    while i < n:
        j = i
        while j + 1 < n:
            d = np.hypot(*(xy[i:j + 1] - xy[j + 1]).T)
            if d.max() > dist_thresh:
                break
            j += 1
        if j > i and pts[j].t - pts[i].t >= time_thresh:
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def oracle_stay_points(traj: Trajectory, dist_thresh: float, time_thresh: float) -> Points:
    out = []
    for i, j in stay_point_runs(traj, dist_thresh, time_thresh):
        seg = traj.points[i:j + 1]
        lon = float(np.mean([p.lon for p in seg]))
        lat = float(np.mean([p.lat for p in seg]))
        out.append(SpatioTemporalPoint(lon, lat, (seg[0].t + seg[-1].t) // 2))
    return Points(tuple(out))


def stay_point_labels(traj: Trajectory, dist_thresh: float, time_thresh: float) -> Tuple[bool, ...]:
    """逐点停留标记，用于 SPD 的 F1"""
    flags = [False] * len(traj)
    for i, j in stay_point_runs(traj, dist_thresh, time_thresh):
        for k in range(i, j + 1):
            flags[k] = True
    return tuple(flags)


# ========== 噪声过滤 ==========
def noise_filter_labels(traj: Trajectory, speed_thresh: float) -> Tuple[bool, ...]:
    """保留标记：内部点在前后两侧的隐含速度都超过阈值时丢弃"""
    pts = traj.points
    keep = [True] * len(pts)
    for i in range(1, len(pts) - 1):
        a, p, b = pts[i - 1], pts[i], pts[i + 1]
        v_in = speed_mps(a.lon, a.lat, a.t, p.lon, p.lat, p.t)
        v_out = speed_mps(p.lon, p.lat, p.t, b.lon, b.lat, b.t)
        if v_in > speed_thresh and v_out > speed_thresh:
            keep[i] = False
    return tuple(keep)


def oracle_noise_filter(traj: Trajectory, speed_thresh: float) -> TrajectoryOut:
    keep = noise_filter_labels(traj, speed_thresh)
    kept = [p for p, k in zip(traj.points, keep) if k]
    return TrajectoryOut(Trajectory(traj.traj_id, traj.user_id, kept), keep=keep)


# ========== 轨迹简化 ==========
def _sync_deviation(xy: np.ndarray, ts: np.ndarray, a: int, f: int) -> np.ndarray:
    """a..f 之间各点到同步位置（按时间在首尾连线上插值）的距离"""
    span = ts[f] - ts[a]
    u = (ts[a + 1:f] - ts[a]) / span
    sync = xy[a] + np.outer(u, xy[f] - xy[a])
    return np.hypot(*(xy[a + 1:f] - sync).T)


def _split_levels(xy: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """完整分裂树上每个点的有效阈值：沿祖先链取分裂偏差的最小值，端点为 inf"""
    n = len(ts)
    level = np.full(n, np.inf)
    stack = [(0, n - 1, np.inf)]
    while stack:
        a, f, cap = stack.pop()
        if f - a < 2:
            continue
        dev = _sync_deviation(xy, ts, a, f)
        k = int(np.argmax(dev))
        mid = a + 1 + k
        level[mid] = min(cap, float(dev[k]))
        stack.append((mid, f, level[mid]))
        stack.append((a, mid, level[mid]))
    return level


def _mask_sed(xy: np.ndarray, ts: np.ndarray, keep: np.ndarray) -> float:
    """保留掩码下的平均同步距离"""
    n = len(ts)
    idx = np.arange(n)
    prev = np.maximum.accumulate(np.where(keep, idx, 0))
    nxt = np.minimum.accumulate(np.where(keep, idx, n - 1)[::-1])[::-1]
    span = ts[nxt] - ts[prev]
    u = np.divide(ts - ts[prev], span, out=np.zeros(n), where=span > 0)
    sync = xy[prev] + u[:, None] * (xy[nxt] - xy[prev])
    return float(np.hypot(*(xy - sync).T).sum()) / n


def simplify_labels(traj: Trajectory, epsilon: float) -> Tuple[bool, ...]:
    """基于同步距离的 Douglas-Peucker，返回保留标记

    阈值 ≥ epsilon 的各层剪枝互相嵌套，取其中 SED 最小者，SED 随 epsilon 单调不减。
    """
    n = len(traj)
    if n <= 2:
        return tuple([True] * n)
    xy = _local_xy(traj.points, float(np.mean(traj.lats())))
    ts = traj.times().astype(np.float64)
    level = _split_levels(xy, ts)
    best = level >= epsilon
    best_sed = _mask_sed(xy, ts, best)
    for theta in np.unique(level[level > epsilon]):
        keep = level >= theta
        cost = _mask_sed(xy, ts, keep)
        if cost < best_sed:
            best, best_sed = keep, cost
    return tuple(bool(k) for k in best)


def oracle_simplify(traj: Trajectory, epsilon: float) -> TrajectoryOut:
    keep = simplify_labels(traj, epsilon)
    kept = [p for p, k in zip(traj.points, keep) if k]
    return TrajectoryOut(Trajectory(traj.traj_id, traj.user_id, kept), keep=keep)


# ========== 地图匹配 ==========
def nearest_segment(lon: float, lat: float, net: RoadNetwork, lat0: float) -> Tuple[int, float, float, float]:
    """返回 (路段 id, 距离米, 投影经度, 投影纬度)；等距时取 id 较小者"""
    if not net.segments:
        raise EmptyNetwork("road network has no segments")
    mx, my = meters_per_degree(lat0)
    px, py = lon * mx, lat * my
    best = None
    for s in net.segments:
        d, qx, qy = point_segment_distance(px, py, s.start_lon * mx, s.start_lat * my,
                                           s.stop_lon * mx, s.stop_lat * my)
        if best is None or d < best[1] - 1e-9:
            best = (s.seg_id, d, qx / mx, qy / my)
    return best


def oracle_map_match(traj: Trajectory, net: RoadNetwork) -> TrajectoryOut:
    if not net.segments:
        raise EmptyNetwork("road network has no segments")
    lat0 = float(np.mean(traj.lats()))
    snapped, ids = [], []
    for p in traj.points:
        seg_id, _, lon, lat = nearest_segment(p.lon, p.lat, net, lat0)
        snapped.append(SpatioTemporalPoint(lon, lat, p.t))
        ids.append(seg_id)
    return TrajectoryOut(Trajectory(traj.traj_id, traj.user_id, snapped), segment_ids=tuple(ids))


# ========== 补全 / 恢复 ==========
def _interpolate(traj: Trajectory, times: Sequence[int]) -> TrajectoryOut:
    pts = list(traj.points)
    ts = traj.times()
    have = set(int(t) for t in ts)
    extra = []
    for t in sorted(set(int(t) for t in times) - have):
        if t < ts[0] or t > ts[-1]:
            raise UnbracketedGap(t)
        k = int(np.searchsorted(ts, t))
        a, b = pts[k - 1], pts[k]
        u = (t - a.t) / (b.t - a.t)
        extra.append(SpatioTemporalPoint(a.lon + u * (b.lon - a.lon), a.lat + u * (b.lat - a.lat), t))
    merged = sorted([(p, False) for p in pts] + [(p, True) for p in extra], key=lambda x: x[0].t)
    out = Trajectory(traj.traj_id, traj.user_id, [p for p, _ in merged])
    return TrajectoryOut(out, inserted=tuple(flag for _, flag in merged))


def gap_times(traj: Trajectory, interval: int) -> List[int]:
    """按规则采样间隔推断缺失时间戳"""
    ts = traj.times()
    missing = []
    for a, b in zip(ts, ts[1:]):
        missing.extend(range(int(a) + interval, int(b), interval))
    return [t for t in missing if t < ts[-1]]


def oracle_impute(traj_with_gaps: Trajectory, missing_times: Optional[Sequence[int]] = None,
                  interval: Optional[int] = None) -> TrajectoryOut:
    """在缺失时间戳处按时间线性插值经纬度"""
    if missing_times is None:
        if interval is None:
            raise ValueError("either missing_times or interval is required")
        missing_times = gap_times(traj_with_gaps, interval)
    return _interpolate(traj_with_gaps, missing_times)


def oracle_recover(sparse: Trajectory, interval: int) -> TrajectoryOut:
    """把稀疏轨迹恢复到规则采样间隔，机制同 oracle_impute"""
    return _interpolate(sparse, gap_times(sparse, interval))


# ========== 分段 / 异常 / 用户 / 出行方式 ==========
def oracle_segment(traj: Trajectory, stay_points: Sequence[SpatioTemporalPoint]) -> TrajectoryOut:
    """每个停留点处切分：新段从首个 t ≥ 停留点时间的点开始"""
    ts = traj.times()
    cuts = set()
    for sp in stay_points:
        k = int(np.searchsorted(ts, sp.t, side="left"))
        if 0 < k < len(ts):
            cuts.add(k)
    boundaries = tuple(sorted(cuts))
    seg_ids, seg = [], 0
    for i in range(len(ts)):
        if i in cuts:
            seg += 1
        seg_ids.append(seg)
    return TrajectoryOut(traj, segment_ids=tuple(seg_ids), boundaries=boundaries)


def max_deviation(traj: Trajectory, reference: Sequence[SpatioTemporalPoint]) -> float:
    """轨迹各点到参考路线折线的最大距离（米）"""
    lat0 = float(np.mean(traj.lats()))
    ref = _local_xy(reference, lat0)
    worst = 0.0
    for x, y in _local_xy(traj.points, lat0):
        if len(ref) == 1:
            d = math.hypot(x - ref[0, 0], y - ref[0, 1])
        else:
            d = min(point_segment_distance(x, y, *ref[k], *ref[k + 1])[0] for k in range(len(ref) - 1))
        worst = max(worst, d)
    return worst


def oracle_anomaly(traj: Trajectory, reference_route: Sequence[SpatioTemporalPoint],
                   detour_thresh: float) -> Classification:
    return Classification(int(max_deviation(traj, reference_route) > detour_thresh))


def label_tul(traj: Trajectory, user_index: Mapping[str, int]) -> Classification:
    return Classification(int(user_index[traj.user_id]))


def mean_speed(traj: Trajectory) -> float:
    pts = traj.points
    duration = pts[-1].t - pts[0].t
    if duration <= 0:
        return 0.0
    dist = sum(distance_m(a.lon, a.lat, b.lon, b.lat) for a, b in zip(pts, pts[1:]))
    return dist / duration


def speed_class(speed: float, bounds: Sequence[float] = TMI_BOUNDS) -> int:
    for k, b in enumerate(bounds):
        if speed < b:
            return k
    return len(bounds)


def label_tmi(traj: Trajectory, bounds: Sequence[float] = TMI_BOUNDS) -> Classification:
    return Classification(speed_class(mean_speed(traj), bounds))


# ========== 指标 ==========
def f1_score(predicted: Sequence, true: Sequence, average: Optional[str] = None,
             positive: int = 1) -> float:
    """F1；P+R=0 时记 0。average 为 None 时二值标签按 binary，多分类按 macro"""
    if len(predicted) != len(true):
        raise LengthMismatch(len(predicted), len(true))
    if len(true) == 0:
        raise LengthMismatch(0, 0)
    pred = [int(x) for x in predicted]
    gold = [int(x) for x in true]
    labels = sorted(set(pred) | set(gold))
    if average is None:
        average = "binary" if set(labels) <= {0, 1} else "macro"
    if average == "binary":
        return float(metrics.f1_score(gold, pred, labels=[positive], average="macro", zero_division=0))
    if average not in ("macro", "micro"):
        raise ValueError(f"unknown average mode {average!r}")
    return float(metrics.f1_score(gold, pred, labels=labels, average=average, zero_division=0))


def sed(simplified: Trajectory, original: Trajectory) -> float:
    """同步欧氏距离：原始点到简化折线上同一时刻位置的距离，按原始点取均值"""
    orig = original.points
    simp = simplified.points
    index = {p.t: i for i, p in enumerate(orig)}
    positions = []
    for p in simp:
        i = index.get(p.t)
        if i is None or orig[i] != p:
            raise NotSubsequence(f"point at t={p.t} is not in the original trajectory")
        positions.append(i)
    if positions[0] != 0 or positions[-1] != len(orig) - 1:
        raise NotSubsequence("simplified trajectory must share both endpoints")
    if any(b <= a for a, b in zip(positions, positions[1:])):
        raise NotSubsequence("simplified points are out of order")

    lat0 = float(np.mean(original.lats()))
    xy = _local_xy(orig, lat0)
    ts = original.times().astype(np.float64)
    keep = np.zeros(len(orig), dtype=bool)
    keep[positions] = True
    return _mask_sed(xy, ts, keep)


# ========== 路网 ==========
ROAD_HEADER = ["id", "start_lon", "start_lat", "stop_lon", "stop_lat"]


def synth_road_network(bbox: Tuple[float, float, float, float], rows: int, cols: int) -> RoadNetwork:
    """规则街道网格：rows+1 条东西向、cols+1 条南北向道路，每个街区边是一个路段"""
    lon_min, lat_min, lon_max, lat_max = bbox
    lons = np.linspace(lon_min, lon_max, cols + 1)
    lats = np.linspace(lat_min, lat_max, rows + 1)
    segments, seg_id = [], 0
    for lat in lats:
        for a, b in zip(lons, lons[1:]):
            segments.append(RoadSegment(seg_id, float(a), float(lat), float(b), float(lat)))
            seg_id += 1
    for lon in lons:
        for a, b in zip(lats, lats[1:]):
            segments.append(RoadSegment(seg_id, float(lon), float(a), float(lon), float(b)))
            seg_id += 1
    return RoadNetwork(tuple(segments))


def load_road_network(path: Union[str, Path]) -> RoadNetwork:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError(1, "file is empty") from None
    if [c.strip() for c in frame.columns] != ROAD_HEADER:
        raise ParseError(1, f"expected header {','.join(ROAD_HEADER)}")
    segments = []
    for line_no, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            segments.append(RoadSegment(int(row[0]), *(float(v) for v in row[1:])))
        except ValueError:
            raise ParseError(line_no, "non-numeric road segment field") from None
    return RoadNetwork(tuple(segments))


def save_road_network(net: RoadNetwork, path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows = [(s.seg_id, repr(s.start_lon), repr(s.start_lat), repr(s.stop_lon), repr(s.stop_lat))
            for s in net.segments]
    pd.DataFrame(rows, columns=ROAD_HEADER).to_csv(path, index=False, encoding="utf-8")
