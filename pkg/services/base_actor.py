"""
基础参与方类 - 服务端与客户端 actor 的抽象接口
"""

import threading
import time
from abc import ABC, abstractmethod
from typing import Dict, List, Optional

from core.comm_ledger import CommLedger
from core.run_logger import get_logger
from core.state_machine import ActorPhase, StateMachine
from services.network import Network


class BaseActor(ABC):
    """所有参与方的基类：独立线程按轮次运行，异常不逃出线程"""

    def __init__(self, name: str, party_id: int, network: Network, ledger: CommLedger, rounds: int):
        self.name = name
        self.party_id = party_id
        self.network = network
        self.ledger = ledger
        self.rounds = rounds
        self.state = StateMachine(name)
        self.logger = get_logger(name.upper())
        self.is_running = True
        self.error: Optional[BaseException] = None
        self.round_times: List[float] = []
        self.losses: List[Dict[str, float]] = []
        self.plans: list = []
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        """启动线程"""
        self._thread = threading.Thread(target=self._run, daemon=True, name=self.name)
        self._thread.start()

    def join(self, timeout: Optional[float] = None) -> None:
        if self._thread is not None:
            self._thread.join(timeout)

    @property
    def alive(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def stop(self) -> None:
        """请求停止；正在阻塞的接收会因网络关闭而返回"""
        self.is_running = False

    def _run(self) -> None:
        try:
            self.setup()
            for r in range(self.rounds):
                if not self.is_running:
                    self.logger.info("stopped")
                    break
                start = time.perf_counter()
                self.run_round(r)
                self.round_times.append(time.perf_counter() - start)
            self.state.transition(ActorPhase.DONE, "all rounds finished")
        except Exception as e:
            self.error = e
            self.logger.error(f"failed: {e}")
            self.state.fail(str(e))
            self.network.close(f"{self.name} failed")

    def setup(self) -> None:
        """进入首轮前的准备（如初始下发适配器）"""

    @abstractmethod
    def run_round(self, round_index: int) -> None:
        """一轮协议：子类实现"""
