"""轨迹数据模型 - 点/轨迹/子轨迹、区域划分、合成数据、污染注入与 CSV 读写"""

import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.errors import (
    InvariantViolation,
    MissingSegment,
    NonMonotonicTime,
    ParseError,
    PointOutsidePartition,
)
from core.geo import meters_per_degree, offset_degrees

CSV_HEADER = ["user_id", "traj_id", "t", "lon", "lat"]
BASE_EPOCH = 1_200_000_000

BBox = Tuple[float, float, float, float]


@dataclass(frozen=True)
class SpatioTemporalPoint:
    """时空点：经度、纬度（度）与整数秒时间戳"""
    lon: float
    lat: float
    t: int

    def __post_init__(self):
        lon, lat = float(self.lon), float(self.lat)
        if not (math.isfinite(lon) and math.isfinite(lat)):
            raise InvariantViolation(f"non-finite coordinate ({self.lon}, {self.lat})")
        if not -180.0 <= lon <= 180.0:
            raise InvariantViolation(f"longitude {lon} out of range")
        if not -90.0 <= lat <= 90.0:
            raise InvariantViolation(f"latitude {lat} out of range")
        if isinstance(self.t, float) and not math.isfinite(self.t):
            raise InvariantViolation(f"non-finite time {self.t}")
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "lat", lat)
        object.__setattr__(self, "t", int(self.t))


def _check_times(points: Sequence[SpatioTemporalPoint], traj_id) -> None:
    for a, b in zip(points, points[1:]):
        if b.t <= a.t:
            raise InvariantViolation(f"time not strictly increasing at t={b.t}", traj_id)


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    user_id: str
    points: Tuple[SpatioTemporalPoint, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise InvariantViolation("trajectory has no points", self.traj_id)
        _check_times(self.points, self.traj_id)

    def __len__(self) -> int:
        return len(self.points)

    def lons(self) -> np.ndarray:
        return np.array([p.lon for p in self.points], dtype=np.float64)

    def lats(self) -> np.ndarray:
        return np.array([p.lat for p in self.points], dtype=np.float64)

    def times(self) -> np.ndarray:
        return np.array([p.t for p in self.points], dtype=np.int64)


@dataclass(frozen=True)
class SubTrajectory:
    """子轨迹：父轨迹在某个客户端区域内的一段最大连续点"""
    parent_id: str
    client_id: int
    segment_index: int
    points: Tuple[SpatioTemporalPoint, ...]
    user_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class RegionPartition:
    """矩形经纬度网格，每个网格单元归属一个客户端"""
    bbox: BBox
    grid: Tuple[int, int]
    cell_to_client: Tuple[int, ...]

    def __post_init__(self):
        lon_min, lat_min, lon_max, lat_max = (float(v) for v in self.bbox)
        if not (lon_min < lon_max and lat_min < lat_max):
            raise InvariantViolation(f"degenerate bbox {self.bbox}")
        rows, cols = (int(v) for v in self.grid)
        if rows <= 0 or cols <= 0:
            raise InvariantViolation(f"grid must be positive, got {self.grid}")
        mapping = self.cell_to_client
        if isinstance(mapping, Mapping):
            missing = [c for c in range(rows * cols) if c not in mapping]
            if missing:
                raise InvariantViolation(f"cells {missing} have no client")
            mapping = tuple(int(mapping[c]) for c in range(rows * cols))
        mapping = tuple(int(c) for c in mapping)
        if len(mapping) != rows * cols:
            raise InvariantViolation(f"expected {rows * cols} cell assignments, got {len(mapping)}")
        object.__setattr__(self, "bbox", (lon_min, lat_min, lon_max, lat_max))
        object.__setattr__(self, "grid", (rows, cols))
        object.__setattr__(self, "cell_to_client", mapping)

    @classmethod
    def uniform(cls, bbox: BBox, rows: int, cols: int, n_clients: int) -> "RegionPartition":
        """网格单元按序号轮流分配给客户端"""
        return cls(bbox, (rows, cols), tuple(c % n_clients for c in range(rows * cols)))

    @property
    def clients(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.cell_to_client)))

    def contains(self, lon: float, lat: float) -> bool:
        lon_min, lat_min, lon_max, lat_max = self.bbox
        return lon_min <= lon <= lon_max and lat_min <= lat <= lat_max

    def cell_of(self, lon: float, lat: float) -> int:
        # 恰好落在边上的点归入序号较大的单元
        lon_min, lat_min, lon_max, lat_max = self.bbox
        rows, cols = self.grid
        col = int(math.floor((lon - lon_min) / (lon_max - lon_min) * cols))
        row = int(math.floor((lat - lat_min) / (lat_max - lat_min) * rows))
        return min(max(row, 0), rows - 1) * cols + min(max(col, 0), cols - 1)

    def client_of(self, point: SpatioTemporalPoint) -> int:
        return self.cell_to_client[self.cell_of(point.lon, point.lat)]


def partition_trajectory(traj: Trajectory, part: RegionPartition) -> List[SubTrajectory]:
    """按客户端区域切分为最大连续段"""
    owners = []
    for i, p in enumerate(traj.points):
        if not part.contains(p.lon, p.lat):
            raise PointOutsidePartition(i)
        owners.append(part.client_of(p))

    subs: List[SubTrajectory] = []
    start = 0
    for i in range(1, len(owners) + 1):
        if i == len(owners) or owners[i] != owners[start]:
            subs.append(SubTrajectory(traj.traj_id, owners[start], len(subs),
                                      traj.points[start:i], traj.user_id))
            start = i
    return subs


def reassemble(subs: Sequence[SubTrajectory]) -> Trajectory:
    """partition_trajectory 的逆操作"""
    if not subs:
        raise MissingSegment(0)
    parent = subs[0].parent_id
    if any(s.parent_id != parent for s in subs):
        raise InvariantViolation("sub-trajectories belong to different parents", parent)
    ordered = sorted(subs, key=lambda s: s.segment_index)
    for expected, sub in enumerate(ordered):
        if sub.segment_index != expected:
            raise MissingSegment(expected)
    points = [p for s in ordered for p in s.points]
    for a, b in zip(points, points[1:]):
        if b.t <= a.t:
            raise NonMonotonicTime(f"time goes from {a.t} to {b.t} in {parent}")
    return Trajectory(parent, ordered[0].user_id, points)


# ========== 合成数据 ==========
class TravelMode(Enum):
    WALK = "walk"
    BIKE = "bike"
    BUS = "bus"
    CAR = "car"


# 各出行方式的速度区间 (m/s)，与 TMI 的 2/6/15 分界一致
MODE_SPEEDS: Dict[TravelMode, Tuple[float, float]] = {
    TravelMode.WALK: (0.8, 1.6),
    TravelMode.BIKE: (3.0, 5.0),
    TravelMode.BUS: (8.0, 12.0),
    TravelMode.CAR: (17.0, 24.0),
}


def _user_route(rng: np.random.Generator, n_points: int, bbox: BBox,
                interval: int) -> Tuple[np.ndarray, "TravelMode"]:
    """一个用户的基础路线：局部米坐标下限速的平滑随机游走"""
    lon_min, lat_min, lon_max, lat_max = bbox
    lat0 = (lat_min + lat_max) / 2.0
    mx, my = meters_per_degree(lat0)
    half_w = (lon_max - lon_min) * mx / 2.0 * 0.9
    half_h = (lat_max - lat_min) * my / 2.0 * 0.9

    mode = list(TravelMode)[int(rng.integers(len(TravelMode)))]
    lo, hi = MODE_SPEEDS[mode]
    speed = rng.uniform(lo, hi)
    pos = np.array([rng.uniform(-half_w, half_w) * 0.5, rng.uniform(-half_h, half_h) * 0.5])
    heading = rng.uniform(0, 2 * math.pi)
    route = np.empty((n_points, 2))
    for i in range(n_points):
        route[i] = pos
        heading += rng.normal(0.0, 0.15)
        step = speed * interval * np.array([math.cos(heading), math.sin(heading)])
        nxt = pos + step
        if abs(nxt[0]) > half_w or abs(nxt[1]) > half_h:
            # 越界时掉头朝向区域中心
            heading = math.atan2(-pos[1], -pos[0]) + rng.normal(0.0, 0.3)
            nxt = pos + speed * interval * np.array([math.cos(heading), math.sin(heading)])
            nxt = np.clip(nxt, [-half_w, -half_h], [half_w, half_h])
        pos = nxt
    return route, mode


def synth_generate(n_users: int, n_trajs: int, points_per_traj: int, bbox: BBox,
                   seed: int, interval: int = 10) -> List[Trajectory]:
    """生成确定性的合成轨迹；第 k 条轨迹属于用户 k % n_users，沿该用户的路线行进"""
    if n_trajs == 0:
        return []
    if n_users <= 0 or n_trajs < 0 or points_per_traj <= 0 or interval <= 0:
        raise InvariantViolation("synthetic counts must be positive")
    lon_min, lat_min, lon_max, lat_max = bbox
    lat0 = (lat_min + lat_max) / 2.0
    lon_c, lat_c = (lon_min + lon_max) / 2.0, (lat_min + lat_max) / 2.0
    rng = np.random.default_rng(seed)
    routes = [_user_route(rng, points_per_traj, bbox, interval)[0] for _ in range(n_users)]

    trajs = []
    for k in range(n_trajs):
        u = k % n_users
        shift = np.clip(rng.normal(0.0, 10.0, 2), -25.0, 25.0)
        jitter = np.clip(rng.normal(0.0, 0.5, (points_per_traj, 2)), -1.5, 1.5)
        xy = routes[u] + shift + jitter
        t0 = BASE_EPOCH + k * 86_400 + int(rng.integers(0, 3_600))
        points = []
        for i, (dx, dy) in enumerate(xy):
            lon, lat = offset_degrees(lon_c, lat_c, float(dx), float(dy), lat0)
            lon = min(max(lon, lon_min), lon_max)
            lat = min(max(lat, lat_min), lat_max)
            points.append(SpatioTemporalPoint(lon, lat, t0 + i * interval))
        trajs.append(Trajectory(f"traj-{k:05d}", f"user-{u:03d}", points))
    return trajs


# ========== 污染注入 ==========
class CorruptionKind(Enum):
    NOISE = "noise"
    DROP = "drop"
    DUPLICATE = "duplicate"
    STAY_INJECT = "stay_inject"
    ANOMALY_DETOUR = "anomaly_detour"


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    rate: float
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if not 0.0 <= self.rate <= 1.0:
            raise InvariantViolation(f"corruption rate {self.rate} outside [0, 1]")
        if self.magnitude < 0:
            raise InvariantViolation(f"corruption magnitude {self.magnitude} is negative")


@dataclass(frozen=True)
class GroundTruth:
    """污染的真值标签，逐点标签对齐污染后的轨迹"""
    kind: CorruptionKind
    noise_flags: Tuple[bool, ...]
    duplicate_flags: Tuple[bool, ...]
    dropped: Tuple[Tuple[int, SpatioTemporalPoint], ...] = ()
    stays: Tuple[Tuple[int, int], ...] = ()
    anomaly: bool = False


def _spaced_picks(rng: np.random.Generator, candidates: Sequence[int], count: int) -> List[int]:
    """随机选至多 count 个下标，任意两个之间至少隔两个未选中的点"""
    chosen: List[int] = []
    taken = set()
    for idx in rng.permutation(np.asarray(candidates, dtype=np.int64)):
        if len(chosen) >= count:
            break
        idx = int(idx)
        if any(idx + d in taken for d in (-2, -1, 1, 2)):
            continue
        chosen.append(idx)
        taken.add(idx)
    return sorted(chosen)


def _median_interval(traj: Trajectory) -> int:
    if len(traj) < 2:
        return 1
    return max(1, int(np.median(np.diff(traj.times()))))


def corrupt(traj: Trajectory, spec: CorruptionSpec) -> Tuple[Trajectory, GroundTruth]:
    """注入一种质量问题，返回污染后的轨迹与真值"""
    n = len(traj)
    points = list(traj.points)
    count = int(math.floor(spec.rate * n))
    if count == 0:
        flags = (False,) * n
        return traj, GroundTruth(spec.kind, flags, flags)

    rng = np.random.default_rng(spec.seed)
    lat0 = float(np.mean(traj.lats()))
    interior = list(range(1, n - 1))

    if spec.kind is CorruptionKind.NOISE:
        sigma = float(spec.magnitude)
        chosen = set(_spaced_picks(rng, interior, count))
        out = []
        for i, p in enumerate(points):
            if i in chosen and sigma > 0:
                v = rng.normal(0.0, sigma, 2)
                norm = float(np.hypot(*v))
                if norm == 0.0:
                    v, norm = np.array([sigma, 0.0]), sigma
                # 位移长度限制在 [σ, 3σ]
                v = v * (min(max(norm, sigma), 3.0 * sigma) / norm)
                lon, lat = offset_degrees(p.lon, p.lat, float(v[0]), float(v[1]), lat0)
                p = SpatioTemporalPoint(min(max(lon, -180.0), 180.0), min(max(lat, -90.0), 90.0), p.t)
            out.append(p)
        flags = tuple(i in chosen for i in range(n))
        return replace(traj, points=out), GroundTruth(spec.kind, flags, (False,) * n)

    if spec.kind is CorruptionKind.DROP:
        count = min(count, len(interior))
        chosen = sorted(int(i) for i in rng.choice(interior, size=count, replace=False)) if count else []
        dropped = tuple((i, points[i]) for i in chosen)
        skip = set(chosen)
        out = [p for i, p in enumerate(points) if i not in skip]
        flags = (False,) * len(out)
        return replace(traj, points=out), GroundTruth(spec.kind, flags, flags, dropped=dropped)

    if spec.kind is CorruptionKind.DUPLICATE:
        roomy = [i for i in range(n - 1) if points[i + 1].t - points[i].t > 1]
        chosen = set(int(i) for i in rng.choice(roomy, size=min(count, len(roomy)), replace=False)) if roomy else set()
        out, dup = [], []
        for i, p in enumerate(points):
            out.append(p)
            dup.append(False)
            if i in chosen:
                gap = points[i + 1].t - p.t
                out.append(SpatioTemporalPoint(p.lon, p.lat, p.t + max(1, min(int(spec.magnitude) or 1, gap - 1))))
                dup.append(True)
        return replace(traj, points=out), GroundTruth(spec.kind, (False,) * len(out), tuple(dup))

    if spec.kind is CorruptionKind.STAY_INJECT:
        step = _median_interval(traj)
        k = max(1, int(spec.magnitude) // step)
        anchors = set(_spaced_picks(rng, interior, count))
        out, stays, shift = [], [], 0
        for i, p in enumerate(points):
            p = SpatioTemporalPoint(p.lon, p.lat, p.t + shift)
            out.append(p)
            if i in anchors:
                for j in range(1, k + 1):
                    d = np.clip(rng.normal(0.0, 3.0, 2), -10.0, 10.0)
                    lon, lat = offset_degrees(p.lon, p.lat, float(d[0]), float(d[1]), lat0)
                    out.append(SpatioTemporalPoint(lon, lat, p.t + j * step))
                stays.append((p.t, p.t + k * step))
                shift += k * step
        flags = (False,) * len(out)
        return replace(traj, points=out), GroundTruth(spec.kind, flags, flags, stays=tuple(stays))

    if spec.kind is CorruptionKind.ANOMALY_DETOUR:
        w = min(max(3, count), max(1, n - 2))
        start = int(rng.integers(1, max(2, n - w)))
        end = min(start + w, n - 1)
        mx, my = meters_per_degree(lat0)
        a, b = points[start - 1], points[min(end, n - 1)]
        dx, dy = (b.lon - a.lon) * mx, (b.lat - a.lat) * my
        norm = math.hypot(dx, dy) or 1.0
        nx, ny = -dy / norm, dx / norm
        out = list(points)
        for j, i in enumerate(range(start, end)):
            bump = math.sin(math.pi * (j + 1) / (end - start + 1)) * spec.magnitude
            lon, lat = offset_degrees(points[i].lon, points[i].lat, nx * bump, ny * bump, lat0)
            out[i] = SpatioTemporalPoint(min(max(lon, -180.0), 180.0), min(max(lat, -90.0), 90.0), points[i].t)
        flags = (False,) * n
        moved = end > start and spec.magnitude > 0
        return replace(traj, points=out), GroundTruth(spec.kind, flags, flags, anomaly=moved)

    raise InvariantViolation(f"unknown corruption kind {spec.kind}")


def corrupt_many(traj: Trajectory, specs: Sequence[CorruptionSpec]) -> Tuple[Trajectory, List[GroundTruth]]:
    """按顺序依次施加多个污染"""
    truths = []
    for spec in specs:
        traj, gt = corrupt(traj, spec)
        truths.append(gt)
    return traj, truths


# ========== CSV ==========
def save_csv(trajs: Sequence[Trajectory], path: Union[str, Path]) -> None:
    """保存为 user_id,traj_id,t,lon,lat，按 (traj_id, t) 排序；浮点数用 repr 保证无损"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [(traj.user_id, traj.traj_id, p.t, repr(p.lon), repr(p.lat))
            for traj in sorted(trajs, key=lambda tr: tr.traj_id) for p in traj.points]
    pd.DataFrame(rows, columns=CSV_HEADER).to_csv(path, index=False, encoding="utf-8")


def load_csv(path: Union[str, Path]) -> List[Trajectory]:
    """读取 CSV 轨迹文件，行号从表头 = 1 开始计"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError(1, "file is empty") from None
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(int(match.group(1)) if match else 0, str(e)) from None
    if [c.strip() for c in frame.columns] != CSV_HEADER:
        raise ParseError(1, f"expected header {','.join(CSV_HEADER)}")

    groups: Dict[str, List[SpatioTemporalPoint]] = {}
    users: Dict[str, str] = {}
    for line_no, (user_id, traj_id, t, lon, lat) in enumerate(frame.itertuples(index=False), start=2):
        try:
            t_val, lon_val, lat_val = int(t), float(lon), float(lat)
        except ValueError:
            raise ParseError(line_no, "non-numeric t/lon/lat") from None
        try:
            point = SpatioTemporalPoint(lon_val, lat_val, t_val)
        except InvariantViolation as e:
            raise InvariantViolation(str(e), traj_id) from None
        groups.setdefault(traj_id, []).append(point)
        users.setdefault(traj_id, user_id)
    return [Trajectory(tid, users[tid], pts) for tid, pts in groups.items()]


def clamp_to_bbox(traj: Trajectory, bbox: BBox) -> Trajectory:
    """把越出区域的点（例如噪声位移后）截回 bbox 内"""
    lon_min, lat_min, lon_max, lat_max = bbox
    points = [SpatioTemporalPoint(min(max(p.lon, lon_min), lon_max), min(max(p.lat, lat_min), lat_max), p.t)
              for p in traj.points]
    return replace(traj, points=points)
