"""运行日志模块 - 模块 logger 与命令启动日志"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

MAX_ENTRIES = 100
LOG_NAME = "launch.log"
_FORMAT = "%(asctime)s [%(name)s] %(message)s"


def get_logger(tag: str) -> logging.Logger:
    """获取带标签的 logger，输出形如 [SERVER] ..."""
    return logging.getLogger(tag)


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    """由 CLI 调用一次，设置全局日志级别"""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=_FORMAT, datefmt="%H:%M:%S", force=True)


def _log_file(out_dir: Path) -> Path:
    return Path(out_dir) / LOG_NAME


def log_run_launch(out_dir: Path, command: str, config_path: Optional[str] = None,
                   seed: Optional[int] = None) -> None:
    """记录命令启动"""
    log_file = _log_file(out_dir)
    log_file.parent.mkdir(parents=True, exist_ok=True)
    entry = {
        "time": datetime.now().isoformat(),
        "command": command,
        "config": config_path or "",
        "seed": seed,
        "out": str(out_dir),
    }
    entries = load_launch_log(out_dir)
    entries.insert(0, entry)
    entries = entries[:MAX_ENTRIES]
    with open(log_file, "w", encoding="utf-8") as f:
        json.dump(entries, f, ensure_ascii=False, indent=2)


def load_launch_log(out_dir: Path) -> list:
    """加载启动日志"""
    log_file = _log_file(out_dir)
    try:
        if log_file.exists():
            with open(log_file, "r", encoding="utf-8") as f:
                return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        get_logger("LOG").warning(f"启动日志损坏，已忽略: {e}")
    return []
