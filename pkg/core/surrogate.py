"""替身语言模型 - 带 LoRA 的分层稠密网络，服务端 LLM 与客户端 SLM 共享适配器与输出头"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.errors import ConfigMismatch, ShapeMismatch, StaleVersion, UnknownLayer
from core.run_logger import get_logger

logger = get_logger("MODEL")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 8
    width: int = 64
    vocab_size: int = 282
    lora_rank: int = 4
    adapter_depth: int = 2
    input_dim: int = 46

    def __post_init__(self):
        for name in ("n_layers", "width", "vocab_size", "lora_rank", "input_dim"):
            if getattr(self, name) <= 0:
                raise ConfigMismatch(f"{name} must be positive")
        if not 0 < self.adapter_depth <= self.n_layers:
            raise ConfigMismatch(f"adapter_depth {self.adapter_depth} outside [1, {self.n_layers}]")


@dataclass
class LayerState:
    """有效权重 = W + lora_B·lora_A；W 形状 (out, in)"""
    layer_id: int
    W: np.ndarray
    b: np.ndarray
    lora_A: np.ndarray
    lora_B: np.ndarray

    @property
    def lora_count(self) -> int:
        return self.lora_A.size + self.lora_B.size

    def effective_weight(self) -> np.ndarray:
        return self.W + self.lora_B @ self.lora_A

    def copy(self, layer_id: Optional[int] = None) -> "LayerState":
        return LayerState(self.layer_id if layer_id is None else layer_id, self.W.copy(), self.b.copy(),
                          self.lora_A.copy(), self.lora_B.copy())

    def lora_vector(self) -> np.ndarray:
        return np.concatenate([self.lora_A.ravel(), self.lora_B.ravel()])


@dataclass
class AdapterBundle:
    """LLM 的最后 k 层（按适配器序号 0..k-1）与共享输出头，带版本号"""
    version: int
    layers: List[LayerState]
    head_W: np.ndarray
    head_b: np.ndarray

    def lora_floats(self) -> int:
        return sum(layer.lora_count for layer in self.layers)

    def full_floats(self) -> int:
        return (sum(l.W.size + l.b.size + l.lora_count for l in self.layers)
                + self.head_W.size + self.head_b.size)

    def copy(self) -> "AdapterBundle":
        return AdapterBundle(self.version, [l.copy() for l in self.layers], self.head_W.copy(), self.head_b.copy())


def _dense(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_out, fan_in)), np.zeros(fan_out)


def _layer(rng: np.random.Generator, layer_id: int, width: int, rank: int) -> LayerState:
    W, b = _dense(rng, width, width)
    bound = np.sqrt(1.0 / width)
    return LayerState(layer_id, W, b, rng.uniform(-bound, bound, (rank, width)), np.zeros((width, rank)))


def _selection_matrix(vocab_size: int, token_range: Tuple[int, int]) -> np.ndarray:
    lo, hi = token_range
    if not 0 <= lo < hi <= vocab_size:
        raise ShapeMismatch(f"token range {token_range} outside vocabulary of {vocab_size}")
    sel = np.zeros((vocab_size, hi - lo))
    sel[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
    return sel


class SurrogateModel:
    """stem (input→width) → n_layers 个残差 LoRA 层 → 冻结的输出头 → softmax"""

    def __init__(self, role: str, config: ModelConfig, stem_W: np.ndarray, stem_b: np.ndarray,
                 layers: List[LayerState], head_W: np.ndarray, head_b: np.ndarray):
        self.role = role
        self.config = config
        self.stem_W = stem_W
        self.stem_b = stem_b
        self.layers = layers
        self.head_W = head_W
        self.head_b = head_b
        self.adapter_version = 0

    # ---------- 结构 ----------
    @property
    def layer_ids(self) -> List[int]:
        return [layer.layer_id for layer in self.layers]

    @property
    def adapter_ids(self) -> List[int]:
        return self.layer_ids[-self.config.adapter_depth:]

    @property
    def foundation_ids(self) -> List[int]:
        return self.layer_ids[:-self.config.adapter_depth]

    def layer(self, layer_id: int) -> LayerState:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise UnknownLayer(layer_id)

    def params(self) -> Dict[str, np.ndarray]:
        """参数名 -> 实际数组（原地更新即修改模型）"""
        out = {"stem.W": self.stem_W, "stem.b": self.stem_b}
        for layer in self.layers:
            p = f"layer{layer.layer_id}"
            out.update({f"{p}.W": layer.W, f"{p}.b": layer.b,
                        f"{p}.lora_A": layer.lora_A, f"{p}.lora_B": layer.lora_B})
        out.update({"head.W": self.head_W, "head.b": self.head_b})
        return out

    def manifest(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(name, arr.shape) for name, arr in self.params().items()]

    # ---------- 前向 ----------
    def forward_tensor(self, x: ad.Tensor, leaves: Optional[Mapping[str, ad.Tensor]] = None,
                       token_range: Optional[Tuple[int, int]] = None) -> ad.Tensor:
        """可求导前向；leaves 中给出的参数参与求导，其余视为常量。

        token_range=(lo, hi) 时只在该 token 区间上做 softmax，得到任务内的类别分布。
        """
        leaves = leaves or {}
        params = self.params()

        def t(name):
            return leaves[name] if name in leaves else ad.Tensor(params[name])

        if x.data.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ShapeMismatch(f"{self.role} expects features of length {self.config.input_dim}, got {x.shape}")
        h = ad.gelu(ad.add(ad.matmul(x, ad.transpose(t("stem.W"))), t("stem.b")))
        for layer in self.layers:
            p = f"layer{layer.layer_id}"
            eff = ad.add(t(f"{p}.W"), ad.matmul(t(f"{p}.lora_B"), t(f"{p}.lora_A")))
            h = ad.add(h, ad.gelu(ad.add(ad.matmul(h, ad.transpose(eff)), t(f"{p}.b"))))
        logits = ad.add(ad.matmul(h, ad.transpose(t("head.W"))), t("head.b"))
        if token_range is not None:
            logits = ad.matmul(logits, ad.Tensor(_selection_matrix(self.config.vocab_size, token_range)))
        return ad.softmax(logits, axis=-1)

    def forward(self, features: np.ndarray, token_range: Optional[Tuple[int, int]] = None) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            return self.forward_tensor(ad.Tensor(x.reshape(1, -1)), token_range=token_range).data[0]
        return self.forward_tensor(ad.Tensor(x), token_range=token_range).data

    def copy(self) -> "SurrogateModel":
        clone = SurrogateModel(self.role, self.config, self.stem_W.copy(), self.stem_b.copy(),
                               [l.copy() for l in self.layers], self.head_W.copy(), self.head_b.copy())
        clone.adapter_version = self.adapter_version
        return clone


def build_llm(config: ModelConfig, seed: int) -> SurrogateModel:
    rng = np.random.default_rng(seed)
    stem_W, stem_b = _dense(rng, config.width, config.input_dim)
    layers = [_layer(rng, i, config.width, config.lora_rank) for i in range(config.n_layers)]
    head_W, head_b = _dense(rng, config.vocab_size, config.width)
    return SurrogateModel("llm", config, stem_W, stem_b, layers, head_W, head_b)


def check_compatible(llm_config: ModelConfig, slm_config: ModelConfig) -> None:
    for name in ("width", "vocab_size", "lora_rank", "adapter_depth"):
        if getattr(llm_config, name) != getattr(slm_config, name):
            raise ConfigMismatch(f"SLM {name}={getattr(slm_config, name)} differs from LLM "
                                 f"{name}={getattr(llm_config, name)}")
    if slm_config.n_layers >= llm_config.n_layers:
        raise ConfigMismatch("SLM must have fewer layers than the LLM")


def build_slm_from_bundle(bundle: AdapterBundle, config: ModelConfig, seed: int) -> SurrogateModel:
    """θ_SLM = [𝒜, ℱ′]：新初始化的基础层 ℱ′ + 收到的适配器 𝒜 的值拷贝"""
    k = len(bundle.layers)
    if k != config.adapter_depth:
        raise ConfigMismatch(f"bundle carries {k} layers, config expects {config.adapter_depth}")
    if bundle.head_W.shape != (config.vocab_size, config.width):
        raise ConfigMismatch(f"bundle head {bundle.head_W.shape} does not fit the SLM config")
    rng = np.random.default_rng(seed)
    stem_W, stem_b = _dense(rng, config.width, config.input_dim)
    n_foundation = config.n_layers - k
    layers = [_layer(rng, i, config.width, config.lora_rank) for i in range(n_foundation)]
    layers += [layer.copy(layer_id=n_foundation + a) for a, layer in enumerate(bundle.layers)]
    slm = SurrogateModel("slm", config, stem_W, stem_b, layers, bundle.head_W.copy(), bundle.head_b.copy())
    slm.adapter_version = bundle.version
    return slm


def build_slm(llm: SurrogateModel, config: ModelConfig, seed: int) -> SurrogateModel:
    check_compatible(llm.config, config)
    return build_slm_from_bundle(dispatch_adapter(llm), config, seed)


# ========== 适配器下发 / 回收 ==========
def dispatch_adapter(llm: SurrogateModel) -> AdapterBundle:
    llm.adapter_version += 1
    layers = [llm.layer(i).copy(layer_id=a) for a, i in enumerate(llm.adapter_ids)]
    return AdapterBundle(llm.adapter_version, layers, llm.head_W.copy(), llm.head_b.copy())


def install_adapter(slm: SurrogateModel, bundle: AdapterBundle, lora_only: bool = False) -> None:
    """客户端装入下发的适配器（lora_only 时只覆盖 LoRA 因子）"""
    for a, layer_id in enumerate(slm.adapter_ids):
        src, dst = bundle.layers[a], slm.layer(layer_id)
        if not lora_only:
            dst.W[...] = src.W
            dst.b[...] = src.b
        dst.lora_A[...] = src.lora_A
        dst.lora_B[...] = src.lora_B
    if not lora_only:
        slm.head_W[...] = bundle.head_W
        slm.head_b[...] = bundle.head_b
    slm.adapter_version = bundle.version


LoraUpdate = Tuple[np.ndarray, np.ndarray, float]   # (lora_A, lora_B, n_j)


def return_adapter(llm: SurrogateModel, bundle: AdapterBundle,
                   updates: Optional[Mapping[int, Sequence[LoraUpdate]]] = None,
                   total_clients: Optional[int] = None, mode: str = "carryover") -> SurrogateModel:
    """把微调后的适配器装回 LLM。

    updates 为 None 时直接装入 bundle 的 LoRA 因子；否则按适配器序号逐层聚合客户端更新，
    没有更新的层保持不变。只改动适配器层的 LoRA 因子。
    """
    from core.tke import aggregate_lora

    if bundle.version != llm.adapter_version:
        raise StaleVersion(llm.adapter_version, bundle.version)
    for a, layer_id in enumerate(llm.adapter_ids):
        dst = llm.layer(layer_id)
        if updates is None:
            dst.lora_A[...] = bundle.layers[a].lora_A
            dst.lora_B[...] = bundle.layers[a].lora_B
            continue
        layer_updates = updates.get(a, ())
        if not layer_updates:
            continue
        n_clients = total_clients or len(layer_updates)
        dst.lora_A[...] = aggregate_lora(layer_id, [(u[0], u[2]) for u in layer_updates], dst.lora_A, n_clients, mode)
        dst.lora_B[...] = aggregate_lora(layer_id, [(u[1], u[2]) for u in layer_updates], dst.lora_B, n_clients, mode)
    llm.adapter_version += 1
    return llm


# ========== 可训练参数 ==========
@dataclass(frozen=True)
class TrainableView:
    names: Tuple[str, ...]
    count: int

    def flat(self, model: SurrogateModel) -> np.ndarray:
        params = model.params()
        if not self.names:
            return np.zeros(0)
        return np.concatenate([params[n].ravel() for n in self.names])


def trainable_params(model: SurrogateModel, selected_layers: Iterable[int]) -> TrainableView:
    """只包含所选层的 lora_A / lora_B"""
    names: List[str] = []
    count = 0
    for layer_id in sorted(set(selected_layers)):
        layer = model.layer(layer_id)
        names += [f"layer{layer_id}.lora_A", f"layer{layer_id}.lora_B"]
        count += layer.lora_count
    return TrainableView(tuple(names), count)


def dense_param_names(model: SurrogateModel, layer_ids: Iterable[int]) -> List[str]:
    return [f"layer{i}.{part}" for i in layer_ids for part in ("W", "b")]
