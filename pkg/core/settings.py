"""设置管理模块 - TOML 配置文件叠加到默认值，校验后生成类型化的运行配置"""

import copy
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from core.errors import ConfigError
from core.surrogate import ModelConfig
from core.tasks import TaskKind
from core.trajectory import CorruptionKind, CorruptionSpec

CORRUPTION_KINDS = tuple(k.value for k in CorruptionKind)


def _default_settings() -> dict:
    """默认设置：与 configs/smoke.toml 一致"""
    return {
        "run": {"seed": 42, "clients": 4, "rounds": 50, "grid": [2, 2]},
        "dataset": {
            "n_users": 8,
            "n_trajs": 48,
            "points_per_traj": 60,
            "interval": 10,
            "bbox": [116.30, 39.90, 116.40, 39.98],
            "test_fraction": 0.25,
            "vocab_grid": [16, 16],
            "road_grid": [8, 8],
            "n_segment_slots": 8,
        },
        "corruption": {
            "order": ["stay_inject", "noise"],
            "noise": {"rate": 0.12, "magnitude": 800.0},
            "drop": {"rate": 0.0, "magnitude": 0.0},
            "duplicate": {"rate": 0.0, "magnitude": 1.0},
            "stay_inject": {"rate": 0.02, "magnitude": 600.0},
            "anomaly_detour": {"rate": 0.0, "magnitude": 300.0},
        },
        "tasks": {
            "train": ["NF", "SPD", "TSim"],
            "unseen": [],
            "f1_average": "macro",
            "speed_thresh": 40.0,
            "stay_dist": 100.0,
            "stay_time": 300.0,
            "simplify_eps": 30.0,
            "detour_thresh": 150.0,
        },
        "llm": {"n_layers": 8, "width": 64, "lora_rank": 4, "adapter_depth": 4},
        "slm": {"n_layers": 6, "train_foundation": True},
        "tpa": {"lr": 1e-3, "batch_size": 64},
        "secure_agg": {"trace": False},
        "tke": {"m": 0.25, "enhance_weight": 0.5, "aggregation": "carryover"},
        "fpo": {
            "freeze_period": 2,
            "local_steps": 3,
            "server_steps": 3,
            "batch_size": 64,
            "lr": 5e-3,
            "client_weights": [1.0, 1.0, 1.0],
            "server_weights": [1.0, 1.0],
            "use_tpa": True,
            "use_sparse_tuning": True,
            "use_freezing": True,
            "timeout": 120.0,
        },
        "output": {"dir": "runs/smoke", "checkpoints": True},
    }


# ========== 类型化配置 ==========
@dataclass(frozen=True)
class DatasetConfig:
    n_users: int
    n_trajs: int
    points_per_traj: int
    interval: int
    bbox: Tuple[float, float, float, float]
    test_fraction: float
    vocab_grid: Tuple[int, int]
    road_grid: Tuple[int, int]
    n_segment_slots: int
    corruption: Tuple[CorruptionSpec, ...]


@dataclass(frozen=True)
class TaskConfig:
    train: Tuple[TaskKind, ...]
    unseen: Tuple[TaskKind, ...]
    f1_average: str
    speed_thresh: float
    stay_dist: float
    stay_time: float
    simplify_eps: float
    detour_thresh: float

    @property
    def all(self) -> Tuple[TaskKind, ...]:
        return self.train + tuple(t for t in self.unseen if t not in self.train)


@dataclass(frozen=True)
class TkeConfig:
    m: float
    enhance_weight: float
    aggregation: str


@dataclass(frozen=True)
class FpoConfig:
    freeze_period: int
    local_steps: int
    server_steps: int
    batch_size: int
    lr: float
    tpa_lr: float
    tpa_batch_size: int
    client_weights: Tuple[float, float, float]
    server_weights: Tuple[float, float]
    use_tpa: bool
    use_sparse_tuning: bool
    use_freezing: bool
    timeout: float
    train_foundation: bool

    @property
    def period(self) -> int:
        return self.freeze_period if self.use_freezing else 1


@dataclass(frozen=True)
class CliConfig:
    out_dir: str
    save_checkpoints: bool
    trace: bool


@dataclass(frozen=True)
class RunConfig:
    seed: int
    clients: int
    rounds: int
    grid: Tuple[int, int]
    dataset: DatasetConfig
    tasks: TaskConfig
    llm_layers: int
    slm_layers: int
    width: int
    lora_rank: int
    adapter_depth: int
    tke: TkeConfig
    fpo: FpoConfig
    output: CliConfig

    @property
    def m(self) -> float:
        return self.tke.m if self.fpo.use_sparse_tuning else 1.0

    def derive_seed(self, *labels: int) -> int:
        """由主种子派生子种子"""
        return derive_seed(self.seed, *labels)

    def model_configs(self, vocab_size: int, llm_input: int, slm_input: int) -> Tuple[ModelConfig, ModelConfig]:
        llm = ModelConfig(self.llm_layers, self.width, vocab_size, self.lora_rank, self.adapter_depth, llm_input)
        slm = ModelConfig(self.slm_layers, self.width, vocab_size, self.lora_rank, self.adapter_depth, slm_input)
        return llm, slm


def derive_seed(seed: int, *labels: int) -> int:
    return int(np.random.SeedSequence([int(seed), *labels]).generate_state(1, dtype=np.uint64)[0] >> 1)


# ========== 读取 / 校验 ==========
class SettingsManager:
    """设置管理器：默认值 + 配置文件覆盖 + 命令行覆盖"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.settings = self._load()

    def _load(self) -> dict:
        """加载设置并叠加到默认值上"""
        settings = _default_settings()
        if self.path is None:
            return settings
        if not self.path.exists():
            raise ConfigError(f"config file not found: {self.path}")
        try:
            with open(self.path, "rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"cannot parse {self.path}: {e}") from None
        _overlay(settings, data)
        return settings

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.settings.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in self.settings or key not in self.settings[section]:
            raise ConfigError(f"unknown setting {section}.{key}", f"{section}.{key}")
        self.settings[section][key] = value

    def build(self, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
        """校验并生成 RunConfig；seed / out_dir 为命令行覆盖"""
        s = copy.deepcopy(self.settings)
        if seed is not None:
            s["run"]["seed"] = seed
        if out_dir is not None:
            s["output"]["dir"] = out_dir
        return _build(s)


def _overlay(base: dict, data: dict, prefix: str = "") -> None:
    """把文件内容叠加到默认值；未知段或键直接报错"""
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{name}'", name)
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{name}' must be a table", name)
            _overlay(base[key], value, f"{name}.")
        else:
            base[key] = value


def _need(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}", key)


def _number(s: dict, section: str, key: str, kind=float, lo=None, hi=None, lo_open=False) -> Any:
    name = f"{section}.{key}"
    value = s[section][key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}", name)
    if kind is int and int(value) != value:
        raise ConfigError(f"{name}: expected an integer, got {value!r}", name)
    value = kind(value)
    if lo is not None:
        _need(value > lo if lo_open else value >= lo, name, f"must be {'>' if lo_open else '>='} {lo}")
    if hi is not None:
        _need(value <= hi, name, f"must be <= {hi}")
    return value


def _flag(s: dict, section: str, key: str) -> bool:
    value = s[section][key]
    _need(isinstance(value, bool), f"{section}.{key}", "expected true or false")
    return value


def _pair(s: dict, section: str, key: str) -> Tuple[int, int]:
    value = s[section][key]
    name = f"{section}.{key}"
    _need(isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and v > 0 for v in value),
          name, "expected two positive integers")
    return int(value[0]), int(value[1])


def _tasks(values, key: str) -> Tuple[TaskKind, ...]:
    _need(isinstance(values, list), key, "expected a list of task names")
    out = []
    for v in values:
        try:
            out.append(TaskKind(v))
        except ValueError:
            raise ConfigError(f"{key}: unknown task {v!r}", key) from None
    return tuple(out)


def _corruption(s: dict, seed: int) -> Tuple[CorruptionSpec, ...]:
    section = s["corruption"]
    order = section["order"]
    _need(isinstance(order, list) and all(k in CORRUPTION_KINDS for k in order),
          "corruption.order", f"entries must be among {', '.join(CORRUPTION_KINDS)}")
    specs = []
    for k, kind in enumerate(order):
        table = section[kind]
        for key in table:
            _need(key in ("rate", "magnitude"), f"corruption.{kind}.{key}", "unknown key")
        rate, magnitude = table.get("rate", 0.0), table.get("magnitude", 0.0)
        for key, value in (("rate", rate), ("magnitude", magnitude)):
            _need(isinstance(value, (int, float)) and not isinstance(value, bool),
                  f"corruption.{kind}.{key}", f"expected a number, got {value!r}")
        _need(0.0 <= rate <= 1.0, f"corruption.{kind}.rate", "must lie in [0, 1]")
        _need(magnitude >= 0.0, f"corruption.{kind}.magnitude", "must be >= 0")
        # 每条轨迹的种子在生成数据时再与轨迹序号组合
        specs.append(CorruptionSpec(CorruptionKind(kind), float(rate), float(magnitude), derive_seed(seed, 7, k)))
    return tuple(specs)


def _build(s: dict) -> RunConfig:
    seed = _number(s, "run", "seed", int, lo=0)
    clients = _number(s, "run", "clients", int, lo=1)
    rounds = _number(s, "run", "rounds", int, lo=0)
    grid = _pair(s, "run", "grid")
    _need(clients <= grid[0] * grid[1], "run.clients", "cannot exceed the number of grid cells")

    bbox = s["dataset"]["bbox"]
    _need(isinstance(bbox, list) and len(bbox) == 4, "dataset.bbox", "expected [lon_min, lat_min, lon_max, lat_max]")
    bbox = tuple(float(v) for v in bbox)
    _need(-180 <= bbox[0] < bbox[2] <= 180 and -90 <= bbox[1] < bbox[3] <= 90, "dataset.bbox", "invalid extent")
    dataset = DatasetConfig(
        n_users=_number(s, "dataset", "n_users", int, lo=1),
        n_trajs=_number(s, "dataset", "n_trajs", int, lo=0),
        points_per_traj=_number(s, "dataset", "points_per_traj", int, lo=2),
        interval=_number(s, "dataset", "interval", int, lo=1),
        bbox=bbox,
        test_fraction=_number(s, "dataset", "test_fraction", float, lo=0.0, hi=1.0),
        vocab_grid=_pair(s, "dataset", "vocab_grid"),
        road_grid=_pair(s, "dataset", "road_grid"),
        n_segment_slots=_number(s, "dataset", "n_segment_slots", int, lo=1),
        corruption=_corruption(s, seed),
    )

    f1_average = s["tasks"]["f1_average"]
    _need(f1_average in ("macro", "micro"), "tasks.f1_average", "expected 'macro' or 'micro'")
    tasks = TaskConfig(
        train=_tasks(s["tasks"]["train"], "tasks.train"),
        unseen=_tasks(s["tasks"]["unseen"], "tasks.unseen"),
        f1_average=f1_average,
        speed_thresh=_number(s, "tasks", "speed_thresh", lo=0.0, lo_open=True),
        stay_dist=_number(s, "tasks", "stay_dist", lo=0.0, lo_open=True),
        stay_time=_number(s, "tasks", "stay_time", lo=0.0, lo_open=True),
        simplify_eps=_number(s, "tasks", "simplify_eps", lo=0.0),
        detour_thresh=_number(s, "tasks", "detour_thresh", lo=0.0),
    )
    _need(len(tasks.train) >= 1, "tasks.train", "at least one training task is required")

    llm_layers = _number(s, "llm", "n_layers", int, lo=1)
    slm_layers = _number(s, "slm", "n_layers", int, lo=1)
    adapter_depth = _number(s, "llm", "adapter_depth", int, lo=1)
    _need(slm_layers < llm_layers, "slm.n_layers", "must be smaller than llm.n_layers")
    _need(adapter_depth <= slm_layers, "llm.adapter_depth", "must not exceed slm.n_layers")

    aggregation = s["tke"]["aggregation"]
    _need(aggregation in ("carryover", "fedavg"), "tke.aggregation", "expected 'carryover' or 'fedavg'")
    tke = TkeConfig(
        m=_number(s, "tke", "m", lo=0.0, hi=1.0, lo_open=True),
        enhance_weight=_number(s, "tke", "enhance_weight", lo=0.0, hi=1.0),
        aggregation=aggregation,
    )

    cw, sw = s["fpo"]["client_weights"], s["fpo"]["server_weights"]
    _need(isinstance(cw, list) and len(cw) == 3 and all(w >= 0 for w in cw), "fpo.client_weights",
          "expected three non-negative weights")
    _need(isinstance(sw, list) and len(sw) == 2 and all(w >= 0 for w in sw), "fpo.server_weights",
          "expected two non-negative weights")
    fpo = FpoConfig(
        freeze_period=_number(s, "fpo", "freeze_period", int, lo=1),
        local_steps=_number(s, "fpo", "local_steps", int, lo=0),
        server_steps=_number(s, "fpo", "server_steps", int, lo=0),
        batch_size=_number(s, "fpo", "batch_size", int, lo=1),
        lr=_number(s, "fpo", "lr", lo=0.0, lo_open=True),
        tpa_lr=_number(s, "tpa", "lr", lo=0.0, lo_open=True),
        tpa_batch_size=_number(s, "tpa", "batch_size", int, lo=1),
        client_weights=tuple(float(w) for w in cw),
        server_weights=tuple(float(w) for w in sw),
        use_tpa=_flag(s, "fpo", "use_tpa"),
        use_sparse_tuning=_flag(s, "fpo", "use_sparse_tuning"),
        use_freezing=_flag(s, "fpo", "use_freezing"),
        timeout=_number(s, "fpo", "timeout", lo=0.0, lo_open=True),
        train_foundation=_flag(s, "slm", "train_foundation"),
    )

    out_dir = s["output"]["dir"]
    _need(isinstance(out_dir, str) and out_dir != "", "output.dir", "expected a directory path")
    output = CliConfig(out_dir, _flag(s, "output", "checkpoints"), _flag(s, "secure_agg", "trace"))

    return RunConfig(
        seed=seed, clients=clients, rounds=rounds, grid=grid, dataset=dataset, tasks=tasks,
        llm_layers=llm_layers, slm_layers=slm_layers,
        width=_number(s, "llm", "width", int, lo=1),
        lora_rank=_number(s, "llm", "lora_rank", int, lo=1),
        adapter_depth=adapter_depth, tke=tke, fpo=fpo, output=output,
    )


def load_config(path: Optional[Union[str, Path]] = None, seed: Optional[int] = None,
                out_dir: Optional[str] = None) -> RunConfig:
    return SettingsManager(path).build(seed=seed, out_dir=out_dir)


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """报告中记录的配置摘要（纯数据，键有序）"""
    return {
        "seed": cfg.seed,
        "clients": cfg.clients,
        "rounds": cfg.rounds,
        "grid": list(cfg.grid),
        "tasks": [t.value for t in cfg.tasks.train],
        "unseen": [t.value for t in cfg.tasks.unseen],
        "llm_layers": cfg.llm_layers,
        "slm_layers": cfg.slm_layers,
        "width": cfg.width,
        "lora_rank": cfg.lora_rank,
        "adapter_depth": cfg.adapter_depth,
        "m": cfg.m,
        "freeze_period": cfg.fpo.period,
        "aggregation": cfg.tke.aggregation,
        "use_tpa": cfg.fpo.use_tpa,
        "corruption": [{"kind": c.kind.value, "rate": c.rate, "magnitude": c.magnitude}
                       for c in cfg.dataset.corruption],
    }
