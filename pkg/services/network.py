"""进程内网络 - 每对参与方一条有序队列，收消息时校验类别，超时或关闭抛 ChannelClosed"""

import queue
import threading
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Tuple

from core.errors import ChannelClosed
from core.run_logger import get_logger
from core.wire import SERVER_ID, Frame, TraceWriter

logger = get_logger("NET")

# 轮询间隔（秒），关闭后尽快唤醒阻塞的接收方
_POLL = 0.05


class MessageKind:
    EMBED = "embed"
    RESULT = "result"
    LORA = "lora"
    ADAPTER = "adapter"
    TPA_BLOCK = "tpa_block"
    TPA_AGG = "tpa_agg"


@dataclass(frozen=True)
class Envelope:
    kind: str
    round: int
    origin: int
    payload: Any = None


class Network:
    """参与方之间的有序信道；(src, dst) 各自独立，保证同一对之间先发先收"""

    def __init__(self, parties: Iterable[int], timeout: float = 120.0,
                 trace: Optional[TraceWriter] = None):
        self.parties = tuple(sorted(set(parties)))
        self.timeout = timeout
        self.trace = trace
        self._channels: Dict[Tuple[int, int], "queue.Queue[Envelope]"] = {
            (a, b): queue.Queue() for a in self.parties for b in self.parties
        }
        self._closed = threading.Event()
        self._reason = ""

    @classmethod
    def for_clients(cls, n_clients: int, timeout: float = 120.0,
                    trace: Optional[TraceWriter] = None) -> "Network":
        return cls(list(range(n_clients)) + [SERVER_ID], timeout, trace)

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def _channel(self, src: int, dst: int) -> "queue.Queue[Envelope]":
        try:
            return self._channels[(src, dst)]
        except KeyError:
            raise ChannelClosed(f"no channel {src} -> {dst}") from None

    def send(self, src: int, dst: int, envelope: Envelope) -> None:
        if self.closed:
            raise ChannelClosed(f"network closed ({self._reason})")
        self._channel(src, dst).put(envelope)

    def record_frame(self, frame: Frame) -> None:
        """secure-agg 帧写入 trace（若开启）"""
        if self.trace is not None:
            self.trace.write(frame)

    def recv(self, dst: int, src: int, kind: str, round_index: Optional[int] = None) -> Envelope:
        """阻塞接收 src -> dst 的下一条消息；类别或轮次不符视为协议错误"""
        channel = self._channel(src, dst)
        waited = 0.0
        while True:
            try:
                envelope = channel.get(timeout=_POLL)
                break
            except queue.Empty:
                if self.closed:
                    raise ChannelClosed(f"network closed while {dst} waited for {kind} from {src} "
                                        f"({self._reason})") from None
                waited += _POLL
                if waited >= self.timeout:
                    raise ChannelClosed(f"timeout: {dst} waited {self.timeout:g}s for {kind} from {src}") from None
        if envelope.kind != kind or (round_index is not None and envelope.round != round_index):
            raise ChannelClosed(f"{dst} expected {kind}@{round_index} from {src}, "
                                f"got {envelope.kind}@{envelope.round}")
        return envelope

    def close(self, reason: str = "closed") -> None:
        if not self.closed:
            self._reason = reason
            self._closed.set()
            logger.debug(f"network closed: {reason}")

    def pending(self) -> int:
        return sum(q.qsize() for q in self._channels.values())
