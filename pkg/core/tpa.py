"""轨迹隐私自编码器 - 逐点编码/解码 MLP、嵌入批次的合并与拆分、重建损失"""

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.errors import DuplicatePointKey, InvariantViolation, LengthMismatch, OutOfNormalizationRange
from core.optim import Adam, SGD
from core.run_logger import get_logger
from core.trajectory import SpatioTemporalPoint

logger = get_logger("TPA")

FEATURES = 3
HIDDEN = 256
EMBED_DIM = 32
ENCODER_SHAPES = ((FEATURES, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, EMBED_DIM))
DECODER_SHAPES = ((EMBED_DIM, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, FEATURES))
LAYER_NAMES = ("enc0", "enc1", "enc2", "dec0", "dec1", "dec2")

PointKey = Tuple[str, int]


@dataclass(frozen=True)
class Normalization:
    """min-max 归一化窗口：数据集 bbox 与时间窗"""
    bbox: Tuple[float, float, float, float]
    t_min: int
    t_max: int

    def __post_init__(self):
        if self.t_max <= self.t_min:
            object.__setattr__(self, "t_max", self.t_min + 1)

    @classmethod
    def from_points(cls, bbox, points: Sequence[SpatioTemporalPoint]) -> "Normalization":
        ts = [p.t for p in points]
        return cls(tuple(bbox), min(ts), max(ts))

    def scale(self, points: Sequence[SpatioTemporalPoint]) -> np.ndarray:
        lon_min, lat_min, lon_max, lat_max = self.bbox
        raw = np.array([[p.lon, p.lat, p.t] for p in points], dtype=np.float64).reshape(-1, 3)
        lo = np.array([lon_min, lat_min, self.t_min], dtype=np.float64)
        hi = np.array([lon_max, lat_max, self.t_max], dtype=np.float64)
        if np.any(raw < lo) or np.any(raw > hi):
            raise OutOfNormalizationRange("point lies outside the normalization bbox/time window")
        return (raw - lo) / (hi - lo)

    def unscale(self, features: np.ndarray) -> List[SpatioTemporalPoint]:
        lon_min, lat_min, lon_max, lat_max = self.bbox
        out = []
        for x, y, z in np.asarray(features, dtype=np.float64).reshape(-1, 3):
            lon = min(max(lon_min + x * (lon_max - lon_min), -180.0), 180.0)
            lat = min(max(lat_min + y * (lat_max - lat_min), -90.0), 90.0)
            out.append(SpatioTemporalPoint(lon, lat, int(round(self.t_min + z * (self.t_max - self.t_min)))))
        return out


class TpaParams:
    """编码器 3→256→256→32，解码器 32→256→256→3，层间 GELU；W 形状 (in, out)"""

    def __init__(self, arrays: Dict[str, np.ndarray], norm: Normalization):
        for name, (fan_in, fan_out) in zip(LAYER_NAMES, ENCODER_SHAPES + DECODER_SHAPES):
            if arrays[f"{name}.W"].shape != (fan_in, fan_out) or arrays[f"{name}.b"].shape != (fan_out,):
                raise InvariantViolation(f"TPA layer {name} must be {fan_in}x{fan_out}")
        self.arrays = arrays
        self.norm = norm

    @classmethod
    def init(cls, seed: int, norm: Normalization) -> "TpaParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, (fan_in, fan_out) in zip(LAYER_NAMES, ENCODER_SHAPES + DECODER_SHAPES):
            bound = np.sqrt(1.0 / fan_in)
            arrays[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            arrays[f"{name}.b"] = np.zeros(fan_out)
        return cls(arrays, norm)

    @classmethod
    def zeros(cls, norm: Normalization) -> "TpaParams":
        arrays = {}
        for name, (fan_in, fan_out) in zip(LAYER_NAMES, ENCODER_SHAPES + DECODER_SHAPES):
            arrays[f"{name}.W"] = np.zeros((fan_in, fan_out))
            arrays[f"{name}.b"] = np.zeros(fan_out)
        return cls(arrays, norm)

    @staticmethod
    def names() -> List[str]:
        return [f"{name}.{part}" for name in LAYER_NAMES for part in ("W", "b")]

    @classmethod
    def param_count(cls) -> int:
        return sum(i * o + o for i, o in ENCODER_SHAPES + DECODER_SHAPES)

    def flatten(self) -> np.ndarray:
        """编码器各层后接解码器各层，每层先行主序的 W 再 b"""
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, norm: Normalization) -> "TpaParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != cls.param_count():
            raise LengthMismatch(flat.size, cls.param_count())
        arrays, pos = {}, 0
        for name, (fan_in, fan_out) in zip(LAYER_NAMES, ENCODER_SHAPES + DECODER_SHAPES):
            arrays[f"{name}.W"] = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            pos += fan_in * fan_out
            arrays[f"{name}.b"] = flat[pos:pos + fan_out].copy()
            pos += fan_out
        return cls(arrays, norm)

    def copy(self) -> "TpaParams":
        return TpaParams({k: v.copy() for k, v in self.arrays.items()}, self.norm)


@dataclass(frozen=True)
class Embedding:
    e: np.ndarray
    point_key: PointKey


@dataclass(frozen=True)
class EmbeddingBatch:
    """一个客户端上传（或收到）的按 point_key 排序的行向量"""
    client_id: int
    keys: Tuple[PointKey, ...]
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(len(self.keys), -1) if self.keys else rows.reshape(0, 0)
        if rows.shape[0] != len(self.keys):
            raise LengthMismatch(rows.shape[0], len(self.keys))
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class EmbeddingUnion:
    """服务端合并后的 ℰ：全局按 (parent_id, t) 排序，并记录每行归属"""
    keys: Tuple[PointKey, ...]
    rows: np.ndarray
    owners: Tuple[int, ...]

    def ownership(self) -> Dict[PointKey, int]:
        return dict(zip(self.keys, self.owners))

    def __len__(self) -> int:
        return len(self.keys)


# ========== 前向 ==========
def _mlp(x: ad.Tensor, layers: Sequence[Tuple[ad.Tensor, ad.Tensor]]) -> ad.Tensor:
    h = x
    for k, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if k < len(layers) - 1:
            h = ad.gelu(h)
    return h


def _layers(leaves: Mapping[str, ad.Tensor], prefix: str) -> List[Tuple[ad.Tensor, ad.Tensor]]:
    return [(leaves[f"{prefix}{k}.W"], leaves[f"{prefix}{k}.b"]) for k in range(3)]


def _constants(params: TpaParams) -> Dict[str, ad.Tensor]:
    return {n: ad.Tensor(a) for n, a in params.arrays.items()}


def encode_features(x: np.ndarray, params: TpaParams) -> np.ndarray:
    return _mlp(ad.Tensor(x), _layers(_constants(params), "enc")).data


def decode_features(e: np.ndarray, params: TpaParams) -> np.ndarray:
    return _mlp(ad.Tensor(e), _layers(_constants(params), "dec")).data


def encode(point: SpatioTemporalPoint, params: TpaParams, parent_id: str = "") -> Embedding:
    e = encode_features(params.norm.scale([point]), params)[0]
    return Embedding(e, (parent_id, point.t))


def encode_batch(points: Sequence[SpatioTemporalPoint], params: TpaParams) -> np.ndarray:
    if not points:
        return np.zeros((0, EMBED_DIM))
    return encode_features(params.norm.scale(points), params)


def decode(embedding: Embedding, params: TpaParams) -> SpatioTemporalPoint:
    return params.norm.unscale(decode_features(embedding.e.reshape(1, -1), params))[0]


def decode_batch(rows: np.ndarray, params: TpaParams) -> List[SpatioTemporalPoint]:
    if len(rows) == 0:
        return []
    return params.norm.unscale(decode_features(np.asarray(rows), params))


def reconstruct(x: ad.Tensor, leaves: Mapping[str, ad.Tensor]) -> ad.Tensor:
    """编码再解码（可求导），用于 ℒ1"""
    return _mlp(_mlp(x, _layers(leaves, "enc")), _layers(leaves, "dec"))


def recon_loss(decoded, true) -> ad.Tensor:
    """归一化特征空间中的 MSE"""
    decoded = decoded if isinstance(decoded, ad.Tensor) else ad.Tensor(decoded)
    true = true if isinstance(true, ad.Tensor) else ad.Tensor(true)
    if decoded.shape[0] != true.shape[0]:
        raise LengthMismatch(decoded.shape[0], true.shape[0])
    return ad.mse(decoded, true)


def recon_step(params: TpaParams, x: np.ndarray, optimizer) -> float:
    """一次重建训练步，返回步前损失"""
    leaves = {n: ad.Tensor(a, requires_grad=True) for n, a in params.arrays.items()}
    loss = recon_loss(reconstruct(ad.Tensor(x), leaves), x)
    grads = ad.backward(loss)
    optimizer.step(params.arrays, {n: grads.of(t) for n, t in leaves.items()})
    return loss.item()


def reconstruction_error(params: TpaParams, x: np.ndarray) -> float:
    return recon_loss(reconstruct(ad.Tensor(x), _constants(params)), x).item()


def train_autoencoder(params: TpaParams, points: Sequence[SpatioTemporalPoint], steps: int,
                      lr: float = 1e-3, optimizer: str = "adam") -> List[float]:
    """在固定点集上全批量训练，返回每步损失"""
    x = params.norm.scale(points)
    opt = Adam(lr) if optimizer == "adam" else SGD(lr)
    history = [recon_step(params, x, opt) for _ in range(steps)]
    history.append(reconstruction_error(params, x))
    logger.debug(f"autoencoder trained {steps} steps: {history[0]:.6f} -> {history[-1]:.6f}")
    return history


# ========== 合并 / 拆分 ==========
def union_embeddings(batches: Sequence[EmbeddingBatch]) -> EmbeddingUnion:
    """按 point_key 全局排序合并；重复 key 报错"""
    entries = []
    seen = set()
    for batch in sorted(batches, key=lambda b: b.client_id):
        for key, row in zip(batch.keys, batch.rows):
            if key in seen:
                raise DuplicatePointKey(key)
            seen.add(key)
            entries.append((key, batch.client_id, row))
    entries.sort(key=lambda e: e[0])
    if not entries:
        width = next((b.rows.shape[1] for b in batches if b.rows.ndim == 2), 0)
        return EmbeddingUnion((), np.zeros((0, width)), ())
    return EmbeddingUnion(tuple(e[0] for e in entries), np.stack([e[2] for e in entries]),
                          tuple(e[1] for e in entries))


def split_results(keys: Sequence[PointKey], rows: np.ndarray,
                  ownership: Mapping[PointKey, int],
                  clients: Optional[Sequence[int]] = None) -> Dict[int, EmbeddingBatch]:
    """union_embeddings 的逆：每行结果按归属路由回客户端"""
    rows = np.asarray(rows, dtype=np.float64)
    per_client: Dict[int, List[int]] = {c: [] for c in (clients or [])}
    for i, key in enumerate(keys):
        per_client.setdefault(ownership[key], []).append(i)
    width = rows.shape[1] if rows.ndim == 2 else 0
    return {c: EmbeddingBatch(c, tuple(keys[i] for i in idx),
                              rows[idx] if idx else np.zeros((0, width)))
            for c, idx in sorted(per_client.items())}
