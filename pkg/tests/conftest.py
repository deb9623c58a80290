from typing import Any, Dict, Optional

import pytest

from core.settings import RunConfig, SettingsManager

# 足够小、几秒内跑完的配置
TINY: Dict[str, Any] = {
    "run.clients": 2,
    "run.rounds": 3,
    "run.grid": [1, 2],
    "dataset.n_users": 3,
    "dataset.n_trajs": 8,
    "dataset.points_per_traj": 20,
    "dataset.vocab_grid": [4, 4],
    "dataset.road_grid": [3, 3],
    "dataset.n_segment_slots": 4,
    "llm.n_layers": 4,
    "llm.width": 16,
    "llm.lora_rank": 2,
    "llm.adapter_depth": 2,
    "slm.n_layers": 3,
    "tke.m": 0.5,
    "tpa.batch_size": 16,
    "fpo.local_steps": 2,
    "fpo.server_steps": 2,
    "fpo.batch_size": 16,
    "fpo.timeout": 60.0,
}


def make_config(out_dir, overrides: Optional[Dict[str, Any]] = None, base: Optional[Dict[str, Any]] = None,
                seed: Optional[int] = None) -> RunConfig:
    """默认设置叠加 "section.key" 形式的覆盖项"""
    manager = SettingsManager()
    for name, value in {**(base or {}), **(overrides or {})}.items():
        section, key = name.split(".", 1)
        manager.set(section, key, value)
    return manager.build(seed=seed, out_dir=str(out_dir))


@pytest.fixture(scope="session")
def tiny_factory():
    """按目录构造小配置；覆盖项写作 section__key=value"""
    def _make(out_dir, **overrides) -> RunConfig:
        flat = {k.replace("__", "."): v for k, v in overrides.items()}
        return make_config(out_dir, flat, TINY)
    return _make


@pytest.fixture
def tiny_config(tmp_path, tiny_factory):
    return lambda **overrides: tiny_factory(tmp_path / "run", **overrides)
