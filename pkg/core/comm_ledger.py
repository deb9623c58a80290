"""通信计量模块 - 按轮次、方向与消息类别统计传输的浮点数与字节数"""

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

from core.wire import HEADER_BYTES


class Direction(Enum):
    UP = "up"        # 客户端 -> 服务端 / 客户端之间
    DOWN = "down"    # 服务端 -> 客户端


class Kind(Enum):
    EMBEDDING = "embedding"
    RESULT = "result"
    LORA = "lora"
    TPA = "tpa"
    ADAPTER = "adapter"


TRAIN = "train"
EVAL = "eval"


def message_bytes(n_floats: int) -> int:
    """8 字节 f64 载荷 + 固定头；空载荷的消息也照发帧头"""
    if n_floats < 0:
        raise ValueError(f"negative float count {n_floats}")
    return 8 * n_floats + HEADER_BYTES


@dataclass
class Entry:
    floats: int = 0
    bytes: int = 0
    messages: int = 0

    def add(self, n_floats: int) -> None:
        self.floats += n_floats
        self.bytes += message_bytes(n_floats)
        self.messages += 1

    def to_dict(self) -> dict:
        return {"floats": self.floats, "bytes": self.bytes, "messages": self.messages}


Slot = Tuple[str, int, Direction, Kind]


class CommLedger:
    """线程安全的通信计量；训练与评估分开记账"""

    def __init__(self):
        self._entries: Dict[Slot, Entry] = {}
        self._lock = threading.Lock()

    def record(self, round_index: int, direction: Direction, kind: Kind, n_floats: int,
               section: str = TRAIN) -> int:
        """记录一条消息，返回其字节数"""
        with self._lock:
            entry = self._entries.setdefault((section, round_index, direction, kind), Entry())
            entry.add(n_floats)
        return message_bytes(n_floats)

    def get(self, round_index: int, direction: Direction, kind: Kind, section: str = TRAIN) -> Entry:
        with self._lock:
            entry = self._entries.get((section, round_index, direction, kind))
            return Entry(entry.floats, entry.bytes, entry.messages) if entry else Entry()

    def rounds(self, section: str = TRAIN) -> List[int]:
        with self._lock:
            return sorted({r for s, r, _, _ in self._entries if s == section})

    def total(self, direction: Optional[Direction] = None, kind: Optional[Kind] = None,
              section: str = TRAIN) -> Entry:
        out = Entry()
        with self._lock:
            for (s, _, d, k), e in self._entries.items():
                if s == section and direction in (None, d) and kind in (None, k):
                    out.floats += e.floats
                    out.bytes += e.bytes
                    out.messages += e.messages
        return out

    def round_bytes(self, round_index: int, kinds: Iterable[Kind], section: str = TRAIN) -> int:
        return sum(self.get(round_index, d, k, section).bytes for d in Direction for k in kinds)

    def to_dict(self) -> dict:
        """按 section -> round -> direction -> kind 展开，键有序"""
        out: dict = {}
        with self._lock:
            items = sorted(self._entries.items(),
                           key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value, kv[0][3].value))
        for (section, r, d, k), e in items:
            out.setdefault(section, {}).setdefault(str(r), {}).setdefault(d.value, {})[k.value] = e.to_dict()
        return out

    def totals_dict(self, section: str = TRAIN) -> dict:
        return {d.value: {k.value: self.total(d, k, section).to_dict() for k in Kind} for d in Direction}
