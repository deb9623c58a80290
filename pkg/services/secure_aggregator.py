"""秘密共享聚合参与方 - 通过进程内网络跑一轮 TPA 参数的掩码分块聚合"""

import threading
from typing import Dict, List, Optional, Sequence

import numpy as np

from core.comm_ledger import CommLedger, Direction, Kind
from core.errors import LengthMismatch, TrajPrepError
from core.run_logger import get_logger
from core.secure_agg import aggregate_masked, assemble, mask_block, partition_params, round_keys
from core.wire import Frame
from services.network import Envelope, MessageKind, Network

logger = get_logger("SECAGG")


class SecureAggregator:
    """客户端 client_id 一侧的协议：掩码各块 → 第 k 块发给客户端 k → 客户端 k 求均值并广播 → 拼接"""

    def __init__(self, client_id: int, num_clients: int, network: Network, session_seed: int,
                 ledger: Optional[CommLedger] = None):
        self.client_id = client_id
        self.num_clients = num_clients
        self.network = network
        self.session_seed = session_seed
        self.ledger = ledger

    def _send(self, dst: int, envelope: Envelope, values: np.ndarray, direction: Direction) -> None:
        self.network.send(self.client_id, dst, envelope)
        if dst == self.client_id:
            return
        self.network.record_frame(Frame(envelope.round, envelope.payload.k, self.client_id, values))
        if self.ledger is not None:
            self.ledger.record(envelope.round, direction, Kind.TPA, values.size)

    def run(self, round_index: int, flat: np.ndarray) -> np.ndarray:
        """返回所有客户端参数的均值；所有参与方得到逐位相同的结果"""
        flat = np.asarray(flat, dtype=np.float64)
        n = self.num_clients
        keyrings = round_keys(n, flat.size, self.session_seed, round_index)
        n_blocks = len(keyrings)

        for block in partition_params(flat, n):
            masked = mask_block(block, self.client_id, keyrings[block.k])
            self._send(block.k, Envelope(MessageKind.TPA_BLOCK, round_index, self.client_id, masked),
                       masked.values, Direction.UP)

        if self.client_id < n_blocks:
            inbox = [self.network.recv(self.client_id, i, MessageKind.TPA_BLOCK, round_index).payload
                     for i in range(n)]
            aggregated = aggregate_masked(inbox, n)
            for j in range(n):
                self._send(j, Envelope(MessageKind.TPA_AGG, round_index, self.client_id, aggregated),
                           aggregated.values, Direction.DOWN)

        blocks = {k: self.network.recv(self.client_id, k, MessageKind.TPA_AGG, round_index).payload
                  for k in range(n_blocks)}
        result = assemble(blocks)
        if result.size != flat.size:
            raise LengthMismatch(result.size, flat.size)
        logger.debug(f"client {self.client_id} round {round_index}: aggregated {flat.size} values "
                     f"in {n_blocks} blocks")
        return result


def run_threaded_aggregation(per_client: Sequence[np.ndarray], session_seed: int, round_index: int = 0,
                             network: Optional[Network] = None,
                             ledger: Optional[CommLedger] = None) -> List[np.ndarray]:
    """每个客户端一个线程跑一轮聚合，返回各自得到的结果（供演示与测试）"""
    n = len(per_client)
    sizes = {np.asarray(p).size for p in per_client}
    if len(sizes) != 1:
        a, b = sorted(sizes)[:2]
        raise LengthMismatch(a, b)
    network = network or Network(range(n), timeout=30.0)
    results: Dict[int, np.ndarray] = {}
    errors: Dict[int, Exception] = {}

    def work(cid: int) -> None:
        try:
            agg = SecureAggregator(cid, n, network, session_seed, ledger)
            results[cid] = agg.run(round_index, per_client[cid])
        except Exception as e:
            errors[cid] = e
            network.close(f"client {cid} failed: {e}")

    threads = [threading.Thread(target=work, args=(cid,), daemon=True, name=f"secagg-{cid}")
               for cid in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        cid, err = sorted(errors.items())[0]
        if isinstance(err, TrajPrepError):
            raise err
        raise TrajPrepError(f"client {cid}: {err}") from err
    return [results[cid] for cid in range(n)]
