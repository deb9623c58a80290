"""联邦数据集 - 合成并污染轨迹、按区域切分到客户端、逐任务构造条目（特征、标签、路由）"""

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import MissingClient
from core.geo import meters_per_degree, point_segment_distance
from core.run_logger import get_logger
from core.settings import RunConfig, TaskConfig
from core.task_router import Route, needs_whole_trajectory, route_task
from core.tasks import (
    TASK_FORMAT,
    OutputFormat,
    RoadNetwork,
    TaskKind,
    label_tmi,
    label_tul,
    nearest_segment,
    noise_filter_labels,
    oracle_anomaly,
    oracle_impute,
    oracle_recover,
    oracle_segment,
    oracle_stay_points,
    simplify_labels,
    stay_point_labels,
    synth_road_network,
)
from core.tke import PROMPT_FEATURES, WEATHER_CONDITIONS, Information, Weather, build_prompt, featurize_prompt
from core.tpa import EMBED_DIM, EmbeddingBatch, EmbeddingUnion, Normalization, PointKey
from core.trajectory import (
    GroundTruth,
    RegionPartition,
    SpatioTemporalPoint,
    SubTrajectory,
    Trajectory,
    clamp_to_bbox,
    corrupt_many,
    partition_trajectory,
    synth_generate,
)
from core.vocab import DROP, KEEP, Vocabulary
from core.wire import SERVER_ID

logger = get_logger("DATA")

CLIENT_FEATURES = 12
SERVER_CONTEXT = 3 * EMBED_DIM + 4
ROAD_TASKS = frozenset({TaskKind.MM, TaskKind.TMI})


# ========== 数据集 ==========
@dataclass
class LabelContext:
    """oracle 打标所需的全部上下文"""
    vocab: Vocabulary
    tasks: TaskConfig
    interval: int
    road: RoadNetwork
    user_index: Dict[str, int]
    references: Dict[str, Tuple[SpatioTemporalPoint, ...]]
    clean: Dict[str, Trajectory] = field(default_factory=dict)


@dataclass
class FederatedDataset:
    partition: RegionPartition
    vocab: Vocabulary
    norm: Normalization
    road: RoadNetwork
    train: List[Trajectory]
    test: List[Trajectory]
    ctx: LabelContext
    truths: Dict[str, List[GroundTruth]] = field(default_factory=dict)

    @property
    def bbox(self):
        return self.partition.bbox


def weather_for(traj_id: str, seed: int) -> Weather:
    """每条轨迹确定性的天气信息"""
    rng = np.random.default_rng([seed, zlib.crc32(traj_id.encode("utf-8"))])
    return Weather(WEATHER_CONDITIONS[int(rng.integers(len(WEATHER_CONDITIONS)))],
                   float(round(rng.uniform(-5.0, 35.0))))


def split_train_test(trajs: Sequence[Trajectory], test_fraction: float, seed: int):
    order = np.random.default_rng(seed).permutation(len(trajs))
    n_test = int(math.ceil(test_fraction * len(trajs))) if test_fraction > 0 else 0
    test_idx = set(int(i) for i in order[:n_test])
    train = [t for i, t in enumerate(trajs) if i not in test_idx]
    test = [t for i, t in enumerate(trajs) if i in test_idx]
    return train, test


def build_dataset(cfg: RunConfig, observed: Sequence[Trajectory],
                  clean: Optional[Sequence[Trajectory]] = None,
                  road: Optional[RoadNetwork] = None,
                  truths: Optional[Dict[str, List[GroundTruth]]] = None) -> FederatedDataset:
    """由观测轨迹（以及可选的干净版本）组装数据集"""
    ds = cfg.dataset
    bbox = ds.bbox
    observed = [clamp_to_bbox(t, bbox) for t in observed]
    clean_map = {t.traj_id: t for t in (clean or observed)}
    users = sorted({t.user_id for t in observed} | {t.user_id for t in clean_map.values()})
    user_index = {u: k for k, u in enumerate(users)}
    references: Dict[str, Tuple[SpatioTemporalPoint, ...]] = {}
    for traj in sorted(clean_map.values(), key=lambda t: t.traj_id):
        references.setdefault(traj.user_id, traj.points)

    all_points = [p for t in observed for p in t.points] or [SpatioTemporalPoint(bbox[0], bbox[1], 0)]
    norm = Normalization.from_points(bbox, all_points)
    vocab = Vocabulary(bbox, ds.vocab_grid, max(len(users), ds.n_users), ds.n_segment_slots)
    road = road if road is not None else synth_road_network(bbox, *ds.road_grid)
    ctx = LabelContext(vocab, cfg.tasks, ds.interval, road, user_index, references, clean_map)
    train, test = split_train_test(observed, ds.test_fraction, cfg.derive_seed(11))
    partition = RegionPartition.uniform(bbox, cfg.grid[0], cfg.grid[1], cfg.clients)
    logger.info(f"dataset: {len(train)} train / {len(test)} test trajectories, "
                f"{len(users)} users, vocab {vocab.size}")
    return FederatedDataset(partition, vocab, norm, road, train, test, ctx, dict(truths or {}))


def synthesize(cfg: RunConfig) -> Tuple[List[Trajectory], List[Trajectory], Dict[str, List[GroundTruth]]]:
    """生成干净轨迹并逐条施加污染，返回 (观测, 干净, 真值)"""
    ds = cfg.dataset
    clean = synth_generate(ds.n_users, ds.n_trajs, ds.points_per_traj, ds.bbox, cfg.derive_seed(1), ds.interval)
    observed, truths = [], {}
    for k, traj in enumerate(clean):
        specs = [replace(spec, seed=cfg.derive_seed(2, k, j)) for j, spec in enumerate(ds.corruption)]
        dirty, gts = corrupt_many(traj, specs)
        observed.append(clamp_to_bbox(dirty, ds.bbox))
        truths[traj.traj_id] = gts
    return observed, clean, truths


def generate_dataset(cfg: RunConfig) -> FederatedDataset:
    observed, clean, truths = synthesize(cfg)
    return build_dataset(cfg, observed, clean, truths=truths)


# ========== oracle 标签 ==========
def point_labels(task: TaskKind, traj: Trajectory, ctx: LabelContext) -> np.ndarray:
    """逐点任务在给定轨迹上的 oracle 标签（任务内的类别序号）"""
    p = ctx.tasks
    if task is TaskKind.NF:
        return np.array([KEEP if k else DROP for k in noise_filter_labels(traj, p.speed_thresh)], dtype=np.int64)
    if task is TaskKind.SPD:
        return np.array(stay_point_labels(traj, p.stay_dist, p.stay_time), dtype=np.int64)
    if task is TaskKind.TSim:
        return np.array([KEEP if k else DROP for k in simplify_labels(traj, p.simplify_eps)], dtype=np.int64)
    if task is TaskKind.TSeg:
        stays = oracle_stay_points(traj, p.stay_dist, p.stay_time).points
        ids = oracle_segment(traj, stays).segment_ids
        return np.minimum(np.array(ids, dtype=np.int64), ctx.vocab.n_classes(task) - 1)
    if task is TaskKind.MM:
        lat0 = float(np.mean(traj.lats()))
        return np.array([ctx.vocab.cell_label(*nearest_segment(q.lon, q.lat, ctx.road, lat0)[2:])
                         for q in traj.points], dtype=np.int64)
    if task in (TaskKind.TI, TaskKind.TR):
        return gap_fill_labels(task, traj, ctx)
    raise ValueError(f"{task.value} is not a per-point task")


def gap_fill_labels(task: TaskKind, traj: Trajectory, ctx: LabelContext) -> np.ndarray:
    """TI / TR：每个点标注其后缺口里第一个插值点的网格；后面没有缺口时取与下一点的中点"""
    if task is TaskKind.TI:
        filled = oracle_impute(traj, interval=ctx.interval)
    else:
        filled = oracle_recover(traj, ctx.interval)
    pts = filled.trajectory.points
    inserted = filled.inserted
    out = []
    for j, q in enumerate(pts):
        if inserted[j]:
            continue
        if j + 1 < len(pts) and inserted[j + 1]:
            out.append(ctx.vocab.cell_label(pts[j + 1].lon, pts[j + 1].lat))
        elif j + 1 < len(pts):
            nxt = pts[j + 1]
            out.append(ctx.vocab.cell_label((q.lon + nxt.lon) / 2.0, (q.lat + nxt.lat) / 2.0))
        else:
            out.append(ctx.vocab.cell_label(q.lon, q.lat))
    return np.array(out, dtype=np.int64)


def trajectory_label(task: TaskKind, traj: Trajectory, ctx: LabelContext) -> int:
    if task is TaskKind.AD:
        reference = ctx.references.get(traj.user_id, traj.points)
        return oracle_anomaly(traj, reference, ctx.tasks.detour_thresh).label
    if task is TaskKind.TUL:
        return label_tul(traj, ctx.user_index).label
    if task is TaskKind.TMI:
        return label_tmi(ctx.clean.get(traj.traj_id, traj)).label
    raise ValueError(f"{task.value} is not a classification task")


def is_classification(task: TaskKind) -> bool:
    return TASK_FORMAT[task] is OutputFormat.CLASSIFICATION


class LabelOracle:
    """整条父轨迹上的 oracle 标签，按 (task, point_key) 查询；只交给损失函数与评估使用"""

    def __init__(self, trajs: Sequence[Trajectory], ctx: LabelContext, tasks: Sequence[TaskKind]):
        self._labels: Dict[TaskKind, Dict[PointKey, int]] = {}
        self._parent: Dict[TaskKind, Dict[str, int]] = {}
        for task in tasks:
            if is_classification(task):
                self._parent[task] = {t.traj_id: trajectory_label(task, t, ctx) for t in trajs}
            else:
                table = {}
                for traj in trajs:
                    for q, y in zip(traj.points, point_labels(task, traj, ctx)):
                        table[(traj.traj_id, q.t)] = int(y)
                self._labels[task] = table

    def label(self, task: TaskKind, key: PointKey) -> int:
        if task in self._parent:
            return self._parent[task][key[0]]
        return self._labels[task][key]

    def labels(self, task: TaskKind, keys: Sequence[PointKey]) -> np.ndarray:
        return np.array([self.label(task, k) for k in keys], dtype=np.int64)


# ========== 客户端特征 ==========
def point_features(points: Sequence[SpatioTemporalPoint], norm: Normalization,
                   stay_dist: float, stay_time: float) -> np.ndarray:
    """只用本段点计算的逐点特征（n × CLIENT_FEATURES）"""
    n = len(points)
    out = np.zeros((n, CLIENT_FEATURES))
    if n == 0:
        return out
    scaled = norm.scale(points)
    lat0 = float(np.mean([p.lat for p in points]))
    mx, my = meters_per_degree(lat0)
    xy = np.array([[p.lon * mx, p.lat * my] for p in points])
    t = np.array([p.t for p in points], dtype=np.float64)

    dt_prev, dt_next = np.zeros(n), np.zeros(n)
    v_prev, v_next = np.zeros(n), np.zeros(n)
    if n > 1:
        dt = np.diff(t)
        v = np.hypot(*np.diff(xy, axis=0).T) / dt
        dt_prev[1:], dt_next[:-1] = dt, dt
        v_prev[1:], v_next[:-1] = v, v
    v_min = np.where((dt_prev > 0) & (dt_next > 0), np.minimum(v_prev, v_next), np.maximum(v_prev, v_next))

    skip, chord = np.zeros(n), np.zeros(n)
    for i in range(1, n - 1):
        skip[i] = np.hypot(*(xy[i + 1] - xy[i - 1])) / (t[i + 1] - t[i - 1])
        chord[i] = point_segment_distance(xy[i, 0], xy[i, 1], xy[i - 1, 0], xy[i - 1, 1],
                                          xy[i + 1, 0], xy[i + 1, 1])[0]

    # 以该点为中心、距离不超过 stay_dist 的最长连续窗口的时长
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    dwell = np.zeros(n)
    for i in range(n):
        far = np.flatnonzero(dist[i] > stay_dist)
        left = far[far < i]
        right = far[far > i]
        lo = int(left[-1]) + 1 if left.size else 0
        hi = int(right[0]) - 1 if right.size else n - 1
        dwell[i] = min((t[hi] - t[lo]) / stay_time, 3.0)

    out[:, 0] = scaled[:, 0]
    out[:, 1] = scaled[:, 1]
    out[:, 2] = np.log1p(dt_prev)
    out[:, 3] = np.log1p(dt_next)
    out[:, 4] = np.log1p(v_prev)
    out[:, 5] = np.log1p(v_next)
    out[:, 6] = np.log1p(v_min)
    out[:, 7] = np.log1p(skip)
    out[:, 8] = np.log1p(chord / 10.0)
    out[:, 9] = dwell
    out[0, 10] = 1.0
    out[-1, 11] = 1.0
    return out


def prompt_information(task: TaskKind, traj_id: str, dataset: FederatedDataset, seed: int) -> Information:
    return Information(dataset.road if task in ROAD_TASKS else None, weather_for(traj_id, seed))


# ========== 条目 ==========
@dataclass
class ItemSet:
    """一个客户端在一个任务上的全部条目"""
    task: TaskKind
    keys: List[PointKey]
    features: np.ndarray
    labels: np.ndarray      # 客户端在自己子轨迹上跑 oracle 得到的标签
    gold: np.ndarray        # 整条父轨迹上的标签，仅用于评估
    cross: np.ndarray
    sub_index: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def local_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.cross)

    @property
    def cross_idx(self) -> np.ndarray:
        return np.flatnonzero(self.cross)


@dataclass
class ClientShard:
    client_id: int
    subs: List[SubTrajectory]
    n_segments: Dict[str, int]
    items: Dict[TaskKind, ItemSet]
    upload_keys: Tuple[PointKey, ...]
    upload_points: Tuple[SpatioTemporalPoint, ...]

    @property
    def all_points(self) -> List[SpatioTemporalPoint]:
        return [p for s in self.subs for p in s.points]

    def cross_requests(self) -> Dict[TaskKind, Tuple[PointKey, ...]]:
        return {task: tuple(items.keys[i] for i in items.cross_idx) for task, items in self.items.items()}


def build_shards(trajs: Sequence[Trajectory], dataset: FederatedDataset, tasks: Sequence[TaskKind],
                 n_clients: int, seed: int) -> Dict[int, ClientShard]:
    """切分轨迹并为每个客户端构造条目；gold 标签在整条父轨迹上计算"""
    ctx = dataset.ctx
    per_client_subs: Dict[int, List[SubTrajectory]] = {c: [] for c in range(n_clients)}
    n_segments: Dict[str, int] = {}
    parents = {t.traj_id: t for t in trajs}
    gold_oracle = LabelOracle(trajs, ctx, tasks)
    for traj in trajs:
        subs = partition_trajectory(traj, dataset.partition)
        n_segments[traj.traj_id] = len(subs)
        for sub in subs:
            if sub.client_id not in per_client_subs:
                raise MissingClient(sub.client_id)
            per_client_subs[sub.client_id].append(sub)

    shards = {}
    for cid, subs in per_client_subs.items():
        rows: Dict[TaskKind, dict] = {task: {"keys": [], "x": [], "y": [], "gold": [], "cross": [], "sub": []}
                                       for task in tasks}
        upload: Dict[PointKey, SpatioTemporalPoint] = {}
        for s_idx, sub in enumerate(subs):
            parent = parents[sub.parent_id]
            own = Trajectory(sub.parent_id, parent.user_id, sub.points)
            feats = point_features(sub.points, dataset.norm, ctx.tasks.stay_dist, ctx.tasks.stay_time)
            n_seg = n_segments[sub.parent_id]
            for task in tasks:
                prompt = featurize_prompt(
                    build_prompt(task, sub.points, prompt_information(task, sub.parent_id, dataset, seed)),
                    dataset.norm)
                r = rows[task]
                if is_classification(task):
                    key = (sub.parent_id, sub.points[0].t)
                    cross = route_task(task, sub, n_seg) is Route.CROSS_CLIENT
                    r["keys"].append(key)
                    r["x"].append(np.concatenate([feats.mean(axis=0), prompt]))
                    r["y"].append(trajectory_label(task, own, ctx))
                    r["gold"].append(gold_oracle.label(task, key))
                    r["cross"].append(cross)
                    r["sub"].append(s_idx)
                    if cross:
                        upload.update({(sub.parent_id, p.t): p for p in sub.points})
                    continue
                own_labels = point_labels(task, own, ctx)
                whole = needs_whole_trajectory(task)
                for i, p in enumerate(sub.points):
                    key = (sub.parent_id, p.t)
                    cross = route_task(task, sub, n_seg, i) is Route.CROSS_CLIENT
                    r["keys"].append(key)
                    r["x"].append(np.concatenate([feats[i], prompt]))
                    r["y"].append(int(own_labels[i]))
                    r["gold"].append(gold_oracle.label(task, key))
                    r["cross"].append(cross)
                    r["sub"].append(s_idx)
                    if cross:
                        upload[key] = p
                        if whole:
                            upload.update({(sub.parent_id, q.t): q for q in sub.points})

        items = {}
        for task, r in rows.items():
            width = client_input_dim()
            items[task] = ItemSet(
                task, r["keys"],
                np.array(r["x"]) if r["x"] else np.zeros((0, width)),
                np.array(r["y"], dtype=np.int64), np.array(r["gold"], dtype=np.int64),
                np.array(r["cross"], dtype=bool), np.array(r["sub"], dtype=np.int64))
        keys = tuple(sorted(upload))
        shards[cid] = ClientShard(cid, subs, {s.parent_id: n_segments[s.parent_id] for s in subs}, items,
                                  keys, tuple(upload[k] for k in keys))
        logger.debug(f"client {cid}: {len(subs)} subs, {len(keys)} upload points, "
                     + ", ".join(f"{t.value}={len(i)}/{int(i.cross.sum())}x" for t, i in items.items()))
    return shards


# ========== 服务端特征 ==========
def server_context(union: EmbeddingUnion, norm: Normalization) -> np.ndarray:
    """[e_prev, e_i, e_next, log1p dt_prev, log1p dt_next, has_prev, has_next]，邻居限定同一父轨迹"""
    n = len(union)
    out = np.zeros((n, SERVER_CONTEXT))
    if n == 0:
        return out
    d = union.rows.shape[1]
    out[:, d:2 * d] = union.rows
    for i, (parent, t) in enumerate(union.keys):
        if i > 0 and union.keys[i - 1][0] == parent:
            out[i, :d] = union.rows[i - 1]
            out[i, 3 * d] = math.log1p(t - union.keys[i - 1][1])
            out[i, 3 * d + 2] = 1.0
        if i + 1 < n and union.keys[i + 1][0] == parent:
            out[i, 2 * d:3 * d] = union.rows[i + 1]
            out[i, 3 * d + 1] = math.log1p(union.keys[i + 1][1] - t)
            out[i, 3 * d + 3] = 1.0
    return out


def server_prompt(task: TaskKind, union: EmbeddingUnion, dataset_road: Optional[RoadNetwork],
                  norm: Normalization) -> np.ndarray:
    batch = EmbeddingBatch(SERVER_ID, union.keys, union.rows)
    info = Information(dataset_road if task in ROAD_TASKS else None)
    return featurize_prompt(build_prompt(task, batch, info), norm)


def server_features(task: TaskKind, keys: Sequence[PointKey], union: EmbeddingUnion,
                    context: np.ndarray, prompt: np.ndarray) -> np.ndarray:
    """服务端条目特征：逐点任务取该点的上下文行，分类任务对父轨迹的全部行取均值"""
    index = {k: i for i, k in enumerate(union.keys)}
    rows = []
    if is_classification(task):
        by_parent = group_by_parent(union.keys)
        for parent, _ in keys:
            rows.append(context[by_parent[parent]].mean(axis=0))
    else:
        rows = [context[index[k]] for k in keys]
    if not rows:
        return np.zeros((0, SERVER_CONTEXT + len(prompt)))
    return np.hstack([np.array(rows), np.tile(prompt, (len(rows), 1))])


def raw_embeddings(points: Sequence[SpatioTemporalPoint], norm: Normalization) -> np.ndarray:
    """关闭 TPA 时直接传输归一化 (lon, lat, t)，补零到嵌入宽度"""
    out = np.zeros((len(points), EMBED_DIM))
    if points:
        out[:, :3] = norm.scale(points)
    return out


def client_input_dim() -> int:
    return CLIENT_FEATURES + PROMPT_FEATURES


def server_input_dim() -> int:
    return SERVER_CONTEXT + PROMPT_FEATURES


def group_by_parent(keys: Sequence[PointKey]) -> Mapping[str, List[int]]:
    out: Dict[str, List[int]] = {}
    for i, (parent, _) in enumerate(keys):
        out.setdefault(parent, []).append(i)
    return out
