"""轨迹知识增强 - 提示构造与特征化、变化率与层选择、LoRA 加权聚合、双向 KL 蒸馏"""

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad
from core.errors import FormatTaskMismatch, InvalidNm, InvariantViolation, NoUpdates, ShapeMismatch
from core.geo import meters_per_degree, point_segment_distance
from core.run_logger import get_logger
from core.tasks import TASK_DESCRIPTIONS, TASK_FORMAT, OutputFormat, RoadNetwork, TaskKind
from core.tpa import EmbeddingBatch, Normalization
from core.trajectory import SpatioTemporalPoint

logger = get_logger("TKE")

WEATHER_CONDITIONS = ("sunny", "rain", "cloudy", "snow")
TEMPERATURE_SCALE = 40.0
N_ROAD_FEATURES = 3
ROAD_DISTANCE_SCALE = 1000.0
CR_EPS = 1e-12

TASK_ORDER = tuple(TaskKind)
FORMAT_ORDER = tuple(OutputFormat)
PROMPT_FEATURES = len(TASK_ORDER) + 13 + len(WEATHER_CONDITIONS) + 1 + N_ROAD_FEATURES + len(FORMAT_ORDER)


# ========== 提示 ==========
@dataclass(frozen=True)
class Weather:
    condition: str
    temperature: float

    def __post_init__(self):
        if self.condition not in WEATHER_CONDITIONS:
            raise InvariantViolation(f"unknown weather condition {self.condition!r}")


@dataclass(frozen=True)
class Information:
    road: Optional[RoadNetwork] = None
    weather: Optional[Weather] = None


PromptData = Union[Tuple[SpatioTemporalPoint, ...], EmbeddingBatch]


@dataclass(frozen=True)
class Prompt:
    """(Task, Data, Information, Format) 指令记录；客户端携带原始点，服务端携带嵌入"""
    task: TaskKind
    description: str
    data: PromptData
    information: Information
    format: OutputFormat

    @property
    def issued_by_server(self) -> bool:
        return isinstance(self.data, EmbeddingBatch)


def build_prompt(task: TaskKind, data, info: Optional[Information] = None,
                 fmt: Optional[OutputFormat] = None) -> Prompt:
    expected = TASK_FORMAT[task]
    fmt = expected if fmt is None else fmt
    if fmt is not expected:
        raise FormatTaskMismatch(f"{task.value} expects {expected.value} output, got {fmt.value}")
    if not isinstance(data, EmbeddingBatch):
        data = tuple(data)
    return Prompt(task, TASK_DESCRIPTIONS[task], data, info or Information(), fmt)


def render_prompt(prompt: Prompt) -> str:
    """人类可读的提示文本"""
    lines = [f"Task: {prompt.description}"]
    if prompt.issued_by_server:
        lines.append(f"Data: {len(prompt.data)} point embeddings from client {prompt.data.client_id}")
    else:
        pts = ", ".join(f"({p.lon:.6f}, {p.lat:.6f}, {p.t})" for p in prompt.data)
        lines.append(f"Data: [{pts}]")
    info = []
    if prompt.information.weather is not None:
        w = prompt.information.weather
        info.append(f"weather {w.condition}, {w.temperature:g}")
    if prompt.information.road is not None:
        info.append(f"{len(prompt.information.road)} road segments "
                    "(id, start longitude, start latitude, stop longitude, stop latitude)")
    lines.append("Information: " + ("; ".join(info) if info else "none"))
    lines.append(f"Format: {prompt.format.value}")
    return "\n".join(lines)


def _summary(values: np.ndarray) -> List[float]:
    if values.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    return [float(values.mean()), float(values.std()), float(values.min()), float(values.max())]


def featurize_prompt(prompt: Prompt, norm: Normalization) -> np.ndarray:
    """task one-hot + 数据统计 + 信息特征 + format one-hot，定长且确定"""
    task = np.zeros(len(TASK_ORDER))
    task[TASK_ORDER.index(prompt.task)] = 1.0

    if prompt.issued_by_server:
        batch = prompt.data
        ts = np.array([k[1] for k in batch.keys], dtype=np.float64)
        # 服务端看不到经纬度，以嵌入前两维代替
        xs = batch.rows[:, 0] if len(batch) else np.zeros(0)
        ys = batch.rows[:, 1] if len(batch) else np.zeros(0)
        count = len(batch)
    else:
        pts = prompt.data
        scaled = norm.scale(pts) if pts else np.zeros((0, 3))
        xs, ys = scaled[:, 0], scaled[:, 1]
        ts = np.array([p.t for p in pts], dtype=np.float64)
        count = len(pts)
    dts = np.diff(ts) / max(norm.t_max - norm.t_min, 1) if ts.size > 1 else np.zeros(0)
    data = [math.log1p(count)] + _summary(xs) + _summary(ys) + _summary(dts)

    weather = np.zeros(len(WEATHER_CONDITIONS) + 1)
    w = prompt.information.weather
    if w is not None:
        weather[WEATHER_CONDITIONS.index(w.condition)] = 1.0
        weather[-1] = w.temperature / TEMPERATURE_SCALE

    road = np.zeros(N_ROAD_FEATURES)
    net = prompt.information.road
    if net is not None and len(net) and not prompt.issued_by_server and prompt.data:
        lat0 = float(np.mean([p.lat for p in prompt.data]))
        mx, my = meters_per_degree(lat0)
        cx = float(np.mean([p.lon for p in prompt.data])) * mx
        cy = lat0 * my
        dists = sorted(point_segment_distance(cx, cy, s.start_lon * mx, s.start_lat * my,
                                              s.stop_lon * mx, s.stop_lat * my)[0] for s in net.segments)
        for k, d in enumerate(dists[:N_ROAD_FEATURES]):
            road[k] = d / ROAD_DISTANCE_SCALE

    fmt = np.zeros(len(FORMAT_ORDER))
    fmt[FORMAT_ORDER.index(prompt.format)] = 1.0
    return np.concatenate([task, data, weather, road, fmt])


# ========== 变化率 / 比例 ==========
def change_rate(current: np.ndarray, previous: np.ndarray) -> float:
    """‖current − previous‖_F / (‖previous‖_F + ε)"""
    current = np.asarray(current, dtype=np.float64)
    previous = np.asarray(previous, dtype=np.float64)
    if current.shape != previous.shape:
        raise ShapeMismatch(f"change_rate: {current.shape} vs {previous.shape}")
    return float(np.linalg.norm(current - previous) / (np.linalg.norm(previous) + CR_EPS))


def ratios(crs: Sequence[float]) -> np.ndarray:
    crs = np.asarray(crs, dtype=np.float64)
    if crs.size == 0:
        raise InvariantViolation("ratios need at least one layer")
    if np.any(crs < 0):
        raise InvariantViolation("change rates must be non-negative")
    total = crs.sum()
    if total <= 0:
        return np.full(crs.size, 1.0 / crs.size)
    return crs / total


@dataclass(frozen=True)
class LayerStats:
    layer_id: int
    prev_params: np.ndarray
    cr: float
    ratio: float


class ChangeRateTracker:
    """逐层保存上一轮 LoRA 参数快照，计算变化率与比例；第 0 轮没有快照，比例均匀"""

    def __init__(self, layer_ids: Sequence[int]):
        self.layer_ids = list(layer_ids)
        self._prev: Dict[int, np.ndarray] = {}
        self._crs: Dict[int, float] = {}
        self._stats: List[LayerStats] = []

    def observe(self, current: Mapping[int, np.ndarray]) -> List[LayerStats]:
        """用本轮结束时的参数更新变化率，并把它存为下一轮的快照"""
        if self._prev:
            self._crs = {i: change_rate(current[i], self._prev[i]) for i in self.layer_ids}
        r = self.ratios()
        self._stats = [LayerStats(i, self._prev.get(i, np.zeros(0)), self._crs.get(i, 0.0), float(r[k]))
                       for k, i in enumerate(self.layer_ids)]
        self._prev = {i: np.array(current[i], dtype=np.float64, copy=True) for i in self.layer_ids}
        return self._stats

    def ratios(self) -> np.ndarray:
        if not self._crs:
            return np.full(len(self.layer_ids), 1.0 / len(self.layer_ids))
        return ratios([self._crs[i] for i in self.layer_ids])

    @property
    def stats(self) -> List[LayerStats]:
        return list(self._stats)


# ========== 层选择 ==========
def n_selected(m: float, n_layers: int) -> int:
    return int(math.floor(m * n_layers + 1e-12))


def _validate(ratio_vec: Sequence[float], n_m: int) -> np.ndarray:
    r = np.asarray(ratio_vec, dtype=np.float64)
    if not 0 <= n_m <= r.size:
        raise InvalidNm(n_m, r.size)
    if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise InvariantViolation("ratios must be a probability vector")
    return r


def _draw_weight(r: np.ndarray, j: int, taken_mass: float, n_taken: int) -> float:
    """剩余层中按比例抽到 j 的概率；剩余质量为 0 时在剩余层中均匀抽取"""
    remaining = 1.0 - taken_mass
    if remaining <= 1e-15:
        return 1.0 / (r.size - n_taken)
    return r[j] / remaining


def selection_probability(ratio_vec: Sequence[float], layer: int, n_m: int) -> float:
    """层 i 在 N_m 次按比例不放回顺序抽取中被选中的概率（嵌套求和的子集动态规划求值）"""
    r = _validate(ratio_vec, n_m)
    if not 0 <= layer < r.size:
        raise InvariantViolation(f"layer index {layer} outside [0, {r.size})")
    return float(_inclusion_probabilities(r, n_m)[layer])


def _inclusion_probabilities(r: np.ndarray, n_m: int) -> np.ndarray:
    n = r.size
    if n_m == 0:
        return np.zeros(n)
    # reach[mask] = 前 |mask| 次抽取恰好得到集合 mask 的概率
    reach = {0: 1.0}
    for _ in range(n_m):
        nxt: Dict[int, float] = {}
        for mask, p in reach.items():
            taken = [j for j in range(n) if mask >> j & 1]
            mass = float(r[taken].sum()) if taken else 0.0
            for j in range(n):
                if mask >> j & 1:
                    continue
                w = _draw_weight(r, j, mass, len(taken))
                if w > 0:
                    nxt[mask | 1 << j] = nxt.get(mask | 1 << j, 0.0) + p * w
        reach = nxt
    probs = np.zeros(n)
    for mask, p in reach.items():
        for j in range(n):
            if mask >> j & 1:
                probs[j] += p
    return probs


def selection_probabilities(ratio_vec: Sequence[float], n_m: int) -> np.ndarray:
    return _inclusion_probabilities(_validate(ratio_vec, n_m), n_m)


def enumerate_selection_probabilities(ratio_vec: Sequence[float], n_m: int) -> np.ndarray:
    """穷举所有有序抽取序列的暴力 oracle"""
    r = _validate(ratio_vec, n_m)
    probs = np.zeros(r.size)
    for seq in itertools.permutations(range(r.size), n_m):
        p, mass = 1.0, 0.0
        for k, j in enumerate(seq):
            p *= _draw_weight(r, j, mass, k)
            mass += r[j]
        for j in seq:
            probs[j] += p
    return probs


@dataclass(frozen=True)
class SelectionPlan:
    round: int
    n_m: int
    selected: Tuple[int, ...]
    probabilities: Tuple[float, ...]
    layer_ids: Tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {"round": self.round, "n_m": self.n_m, "selected": list(self.selected),
                "probabilities": [round(p, 12) for p in self.probabilities],
                "layer_ids": list(self.layer_ids)}


def select_layers(ratio_vec: Sequence[float], n_m: int, seed, round_index: int = 0,
                  layer_ids: Optional[Sequence[int]] = None) -> SelectionPlan:
    """N_m 次顺序抽取，每次在未选层中按比例（重新归一化）抽一层"""
    r = _validate(ratio_vec, n_m)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = list(layer_ids) if layer_ids is not None else list(range(r.size))
    chosen: List[int] = []
    mass = 0.0
    for _ in range(n_m):
        remaining = [j for j in range(r.size) if j not in chosen]
        weights = np.array([_draw_weight(r, j, mass, len(chosen)) for j in remaining])
        weights = weights / weights.sum()
        pick = remaining[int(np.searchsorted(np.cumsum(weights), rng.random(), side="right").clip(0, len(remaining) - 1))]
        chosen.append(pick)
        mass += r[pick]
    probs = _inclusion_probabilities(r, n_m)
    return SelectionPlan(round_index, n_m, tuple(ids[j] for j in chosen), tuple(float(p) for p in probs), tuple(ids))


def simulate_selection(ratio_vec: Sequence[float], n_m: int, trials: int, seed: int) -> np.ndarray:
    """向量化蒙特卡洛：以 u^(1/w) 为键取前 N_m 个，等价于按比例不放回顺序抽取"""
    r = _validate(ratio_vec, n_m)
    if n_m == 0 or trials <= 0:
        return np.zeros(r.size)
    rng = np.random.default_rng(seed)
    u = rng.random((trials, r.size))
    positive = r > 0
    with np.errstate(divide="ignore"):
        key = np.where(positive, np.log(u) / np.where(positive, r, 1.0), 0.0)
    # 正比例层总是排在零比例层前面，零比例层之间随机
    order = np.lexsort((np.where(positive, key, u), np.broadcast_to(positive, u.shape)), axis=-1)
    picked = order[:, -n_m:]
    counts = np.zeros(r.size)
    np.add.at(counts, picked.ravel(), 1)
    return counts / trials


# ========== LoRA 聚合 ==========
def aggregate_lora(layer_id: int, updates: Sequence[Tuple[np.ndarray, float]], previous: np.ndarray,
                   total_clients: int, mode: str = "carryover") -> np.ndarray:
    """W̄ = ((|C|−|C′|)·Σn_jW_j/Σn_j + W̄_prev) / (|C|−|C′|+1)；mode="fedavg" 时直接取加权平均"""
    if not updates:
        raise NoUpdates(layer_id)
    c_prime = len(updates)
    if c_prime > total_clients:
        raise InvariantViolation(f"{c_prime} updates for layer {layer_id} but only {total_clients} clients")
    weights = np.array([float(n) for _, n in updates])
    if np.any(weights <= 0):
        raise InvariantViolation("update weights n_j must be positive")
    avg = sum(w * np.asarray(W, dtype=np.float64) for (W, _), w in zip(updates, weights)) / weights.sum()
    if mode == "fedavg":
        return avg
    if mode != "carryover":
        raise InvariantViolation(f"unknown aggregation mode {mode!r}")
    gap = total_clients - c_prime
    return (gap * avg + np.asarray(previous, dtype=np.float64)) / (gap + 1)


# ========== 蒸馏损失 ==========
def reverse_kl_loss(slm_out: ad.Tensor, llm_out: ad.Tensor) -> ad.Tensor:
    """D_KL(P_SLM ‖ P_LLM)，只对 SLM 求导"""
    return ad.kl_div(slm_out, ad.detach(llm_out))


def forward_kl_loss(llm_out: ad.Tensor, slm_out: ad.Tensor) -> ad.Tensor:
    """同一表达式 D_KL(P_SLM ‖ P_LLM)，只对 LLM 求导"""
    return ad.kl_div(ad.detach(slm_out), llm_out)


def enhance_result(slm_out: np.ndarray, llm_out: np.ndarray, weight: float = 0.5) -> np.ndarray:
    """客户端最终结果：SLM 输出与 LLM 返回结果的凸组合"""
    mixed = (1.0 - weight) * np.asarray(slm_out) + weight * np.asarray(llm_out)
    return mixed / mixed.sum(axis=-1, keepdims=True)
