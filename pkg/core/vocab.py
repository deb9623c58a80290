"""共享输出词表 - 网格单元、各任务类别、保留/丢弃与分段槽位"""

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

from core.tasks import TMI_CLASSES, TaskKind

# 各块在词表中的顺序
BLOCK_ORDER = ("cell", "AD", "SPD", "TUL", "TMI", "keepdrop", "segment")

TASK_BLOCK: Dict[TaskKind, str] = {
    TaskKind.AD: "AD",
    TaskKind.SPD: "SPD",
    TaskKind.TUL: "TUL",
    TaskKind.TMI: "TMI",
    TaskKind.NF: "keepdrop",
    TaskKind.TSim: "keepdrop",
    TaskKind.TSeg: "segment",
    TaskKind.MM: "cell",
    TaskKind.TI: "cell",
    TaskKind.TR: "cell",
}

KEEP = 0
DROP = 1


@dataclass(frozen=True)
class Vocabulary:
    bbox: Tuple[float, float, float, float]
    grid: Tuple[int, int] = (16, 16)
    n_users: int = 1
    n_segment_slots: int = 8
    _ranges: Dict[str, Tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = {
            "cell": self.grid[0] * self.grid[1],
            "AD": 2,
            "SPD": 2,
            "TUL": max(1, self.n_users),
            "TMI": len(TMI_CLASSES),
            "keepdrop": 2,
            "segment": self.n_segment_slots,
        }
        ranges, lo = {}, 0
        for name in BLOCK_ORDER:
            ranges[name] = (lo, lo + sizes[name])
            lo += sizes[name]
        object.__setattr__(self, "_ranges", ranges)

    @property
    def size(self) -> int:
        return self._ranges[BLOCK_ORDER[-1]][1]

    def block_range(self, name: str) -> Tuple[int, int]:
        return self._ranges[name]

    def token_range(self, task: TaskKind) -> Tuple[int, int]:
        """任务输出格式允许的 token 区间 [lo, hi)"""
        return self._ranges[TASK_BLOCK[task]]

    def n_classes(self, task: TaskKind) -> int:
        lo, hi = self.token_range(task)
        return hi - lo

    def token(self, task: TaskKind, label: int) -> int:
        lo, hi = self.token_range(task)
        label = min(max(int(label), 0), hi - lo - 1)
        return lo + label

    def label(self, task: TaskKind, token: int) -> int:
        return int(token) - self.token_range(task)[0]

    def cell_label(self, lon: float, lat: float) -> int:
        """网格单元序号，越界点截断到边缘单元"""
        lon_min, lat_min, lon_max, lat_max = self.bbox
        rows, cols = self.grid
        col = int(math.floor((lon - lon_min) / (lon_max - lon_min) * cols))
        row = int(math.floor((lat - lat_min) / (lat_max - lat_min) * rows))
        return min(max(row, 0), rows - 1) * cols + min(max(col, 0), cols - 1)

    def describe(self) -> Dict[str, Tuple[int, int]]:
        return dict(self._ranges)
