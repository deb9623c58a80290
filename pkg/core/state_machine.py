"""状态机管理 - 参与方（服务端/客户端）的阶段转换规则"""

import threading
from enum import Enum
from typing import Callable, Dict, List

from core.run_logger import get_logger

logger = get_logger("STATE")


class ActorPhase(Enum):
    """参与方阶段枚举"""
    IDLE = "idle"                # 空闲 / 轮次之间
    UPLOADING = "uploading"      # 交换嵌入与结果
    TRAINING = "training"        # 本地目标函数优化
    AGGREGATING = "aggregating"  # LoRA 回收与 TPA 秘密共享聚合
    DONE = "done"
    ERROR = "error"


_VALID_TRANSITIONS: Dict[ActorPhase, List[ActorPhase]] = {
    ActorPhase.IDLE: [ActorPhase.UPLOADING, ActorPhase.TRAINING, ActorPhase.DONE, ActorPhase.ERROR],
    ActorPhase.UPLOADING: [ActorPhase.TRAINING, ActorPhase.ERROR],
    ActorPhase.TRAINING: [ActorPhase.AGGREGATING, ActorPhase.IDLE, ActorPhase.ERROR],
    ActorPhase.AGGREGATING: [ActorPhase.IDLE, ActorPhase.ERROR],
    ActorPhase.DONE: [],
    ActorPhase.ERROR: [ActorPhase.IDLE],
}


class StateMachine:
    """状态机 - 管理一个参与方的阶段转换"""

    def __init__(self, owner: str = ""):
        self.owner = owner
        self.current_state = ActorPhase.IDLE
        self.state_callbacks: Dict[ActorPhase, List[Callable[[], None]]] = {}
        self.history: List[ActorPhase] = [ActorPhase.IDLE]
        self._lock = threading.Lock()

    def register_callback(self, state: ActorPhase, callback: Callable[[], None]) -> None:
        """注册状态变化回调"""
        self.state_callbacks.setdefault(state, []).append(callback)

    def transition(self, new_state: ActorPhase, reason: str = "") -> bool:
        """状态转换；非法转换返回 False 并保持原状态"""
        with self._lock:
            if new_state not in _VALID_TRANSITIONS[self.current_state]:
                logger.warning(f"{self.owner} 非法转换: {self.current_state.value} -> {new_state.value}")
                return False
            old_state = self.current_state
            self.current_state = new_state
            self.history.append(new_state)
        logger.debug(f"{self.owner} 转换: {old_state.value} -> {new_state.value} ({reason})")

        for callback in self.state_callbacks.get(new_state, []):
            try:
                callback()
            except Exception as e:
                logger.error(f"{self.owner} 回调错误: {e}")
        return True

    def fail(self, reason: str) -> None:
        """任意阶段都可进入 ERROR"""
        with self._lock:
            if self.current_state is ActorPhase.ERROR:
                return
            self.current_state = ActorPhase.ERROR
            self.history.append(ActorPhase.ERROR)
        logger.error(f"{self.owner} -> error ({reason})")
        for callback in self.state_callbacks.get(ActorPhase.ERROR, []):
            try:
                callback()
            except Exception as e:
                logger.error(f"{self.owner} 回调错误: {e}")

    def is_idle(self) -> bool:
        return self.current_state == ActorPhase.IDLE

    def is_busy(self) -> bool:
        return self.current_state in (ActorPhase.UPLOADING, ActorPhase.TRAINING, ActorPhase.AGGREGATING)

    def reset(self) -> None:
        """从错误中恢复到空闲"""
        self.transition(ActorPhase.IDLE, "reset")
