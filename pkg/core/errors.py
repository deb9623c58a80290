"""异常体系 - 所有模块共用的错误类型"""

from typing import Any, Optional


class TrajPrepError(Exception):
    """所有业务错误的基类"""


class ConfigError(TrajPrepError):
    """配置文件或参数校验失败"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


# ========== 轨迹数据 ==========
class InvariantViolation(TrajPrepError):
    def __init__(self, message: str, traj_id: Any = None):
        super().__init__(message if traj_id is None else f"[{traj_id}] {message}")
        self.traj_id = traj_id


class PointOutsidePartition(TrajPrepError):
    def __init__(self, index: int):
        super().__init__(f"point {index} lies outside the partition bbox")
        self.index = index


class MissingSegment(TrajPrepError):
    def __init__(self, segment_index: int):
        super().__init__(f"segment {segment_index} is missing")
        self.segment_index = segment_index


class NonMonotonicTime(TrajPrepError):
    pass


class ParseError(TrajPrepError):
    def __init__(self, line: int, message: str = "malformed row"):
        super().__init__(f"line {line}: {message}")
        self.line = line


# ========== 任务与指标 ==========
class UnbracketedGap(TrajPrepError):
    def __init__(self, t: int):
        super().__init__(f"missing timestamp {t} is not bracketed by observed points")
        self.t = t


class EmptyNetwork(TrajPrepError):
    pass


class LengthMismatch(TrajPrepError):
    def __init__(self, left: int, right: int):
        super().__init__(f"length mismatch: {left} != {right}")
        self.left = left
        self.right = right


class NotSubsequence(TrajPrepError):
    pass


# ========== 自动微分 ==========
class ShapeMismatch(TrajPrepError):
    pass


class NonScalarLoss(TrajPrepError):
    pass


class NonFiniteValue(TrajPrepError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by {op}")
        self.op = op


class NotNormalized(TrajPrepError):
    pass


# ========== TPA / 安全聚合 ==========
class OutOfNormalizationRange(TrajPrepError):
    pass


class DuplicatePointKey(TrajPrepError):
    def __init__(self, key: Any):
        super().__init__(f"duplicate point key {key}")
        self.key = key


class MissingKey(TrajPrepError):
    def __init__(self, j: int):
        super().__init__(f"no pairwise key shared with client {j}")
        self.j = j


class MissingClient(TrajPrepError):
    def __init__(self, client_id: Any):
        super().__init__(f"no masked block from client {client_id}")
        self.client_id = client_id


# ========== 模型 ==========
class ConfigMismatch(TrajPrepError):
    pass


class StaleVersion(TrajPrepError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"adapter version {got} is stale (expected {expected})")
        self.expected = expected
        self.got = got


class UnknownLayer(TrajPrepError):
    def __init__(self, layer_id: int):
        super().__init__(f"unknown layer {layer_id}")
        self.layer_id = layer_id


class FormatTaskMismatch(TrajPrepError):
    pass


class InvalidNm(TrajPrepError):
    def __init__(self, n_m: int, n: int):
        super().__init__(f"N_m={n_m} is outside [0, {n}]")
        self.n_m = n_m
        self.n = n


class NoUpdates(TrajPrepError):
    def __init__(self, layer_id: Any = None):
        super().__init__(f"no client updates for layer {layer_id}")
        self.layer_id = layer_id


# ========== 联邦运行 ==========
class ChannelClosed(TrajPrepError):
    pass


class MissingBatch(TrajPrepError):
    def __init__(self, client_id: Any):
        super().__init__(f"no embedding batch from client {client_id}")
        self.client_id = client_id


class ActorFailure(TrajPrepError):
    """汇总所有 actor 线程中记录的失败"""

    def __init__(self, failures: dict):
        lines = [f"{name}: {err}" for name, err in sorted(failures.items())]
        super().__init__("actor failures:\n  " + "\n  ".join(lines))
        self.failures = failures
