"""消息线格式 - (round u32, block u16, origin u16, len u32) 头 + 小端 f64 数组，以及二进制 trace 日志"""

import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterator, List, Optional, Union

import numpy as np

from core.errors import ParseError

HEADER = struct.Struct("<IHHI")
HEADER_BYTES = HEADER.size
F64 = np.dtype("<f8")
# origin 字段中代表服务端
SERVER_ID = 0xFFFF


@dataclass(frozen=True)
class Frame:
    round: int
    block: int
    origin: int
    values: np.ndarray

    @property
    def nbytes(self) -> int:
        return frame_bytes(len(self.values))


def frame_bytes(n_floats: int) -> int:
    return HEADER_BYTES + F64.itemsize * n_floats


def encode_frame(frame: Frame) -> bytes:
    values = np.ascontiguousarray(frame.values, dtype=F64)
    return HEADER.pack(frame.round, frame.block, frame.origin, values.size) + values.tobytes()


def decode_frame(buf: bytes, offset: int = 0) -> Frame:
    if len(buf) - offset < HEADER_BYTES:
        raise ParseError(offset, "truncated frame header")
    rnd, block, origin, n = HEADER.unpack_from(buf, offset)
    start = offset + HEADER_BYTES
    end = start + n * F64.itemsize
    if end > len(buf):
        raise ParseError(offset, "truncated frame payload")
    values = np.frombuffer(buf[start:end], dtype=F64).astype(np.float64)
    return Frame(rnd, block, origin, values)


def iter_frames(buf: bytes) -> Iterator[Frame]:
    offset = 0
    while offset < len(buf):
        frame = decode_frame(buf, offset)
        offset += frame.nbytes
        yield frame


class TraceWriter:
    """线程安全地把经过网络的帧追加写入 trace 文件"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._fh: Optional[BinaryIO] = open(self.path, "wb")

    def write(self, frame: Frame) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.write(encode_frame(frame))

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path: Union[str, Path]) -> List[Frame]:
    return list(iter_frames(Path(path).read_bytes()))
