"""秘密共享聚合 - 成对掩码密钥、参数分块、掩码、掩码聚合与广播"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvariantViolation, LengthMismatch, MissingClient, MissingKey
from core.run_logger import get_logger
from core.wire import Frame

logger = get_logger("SECAGG")


@dataclass(frozen=True)
class MaskKey:
    i: int
    j: int
    mask: np.ndarray


@dataclass(frozen=True)
class KeyRing:
    """一轮一块的全部成对密钥，按 (min, max) 存放，sk_ij = sk_ji"""
    num_clients: int
    keys: Mapping[Tuple[int, int], MaskKey] = field(default_factory=dict)

    def mask(self, i: int, j: int) -> np.ndarray:
        key = self.keys.get((min(i, j), max(i, j)))
        if key is None:
            raise MissingKey(j)
        return key.mask

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True)
class ParameterBlock:
    k: int
    values: np.ndarray


@dataclass(frozen=True)
class MaskedBlock:
    k: int
    origin: int
    values: np.ndarray


def pair_seed(session_seed: int, i: int, j: int, round_index: int = 0, block_index: int = 0) -> np.random.SeedSequence:
    lo, hi = min(i, j), max(i, j)
    return np.random.SeedSequence([session_seed, round_index, block_index, lo, hi])


def gen_pairwise_keys(num_clients: int, block_len: int, session_seed: int,
                      round_index: int = 0, block_index: int = 0) -> KeyRing:
    """所有无序客户端对的掩码，元素 i.i.d. 取自 [-1, 1]"""
    keys = {}
    for i in range(num_clients):
        for j in range(i + 1, num_clients):
            rng = np.random.default_rng(pair_seed(session_seed, i, j, round_index, block_index))
            keys[(i, j)] = MaskKey(i, j, rng.uniform(-1.0, 1.0, block_len))
    return KeyRing(num_clients, keys)


def zero_keys(num_clients: int, block_len: int) -> KeyRing:
    keys = {(i, j): MaskKey(i, j, np.zeros(block_len))
            for i in range(num_clients) for j in range(i + 1, num_clients)}
    return KeyRing(num_clients, keys)


def block_size(length: int, num_clients: int) -> int:
    return int(math.ceil(length / num_clients))


def partition_params(flat: np.ndarray, num_clients: int) -> List[ParameterBlock]:
    """按 ⌈L/|C|⌉ 连续切块，最后一块取余数"""
    flat = np.asarray(flat, dtype=np.float64)
    if flat.size == 0:
        raise InvariantViolation("cannot partition an empty parameter vector")
    size = block_size(flat.size, num_clients)
    return [ParameterBlock(k, flat[start:start + size].copy())
            for k, start in enumerate(range(0, flat.size, size))]


def sign(i: int, j: int) -> float:
    """a_ij：i<j 为 +1，i>j 为 -1"""
    return 1.0 if i < j else -1.0


def mask_block(block: ParameterBlock, i: int, keys: KeyRing) -> MaskedBlock:
    values = block.values.copy()
    for j in range(keys.num_clients):
        if j == i:
            continue
        mask = keys.mask(i, j)
        values += sign(i, j) * mask[:values.size]
    return MaskedBlock(block.k, i, values)


def aggregate_masked(blocks: Sequence[MaskedBlock], num_clients: int) -> ParameterBlock:
    """(1/|C|)·Σ 掩码块；掩码两两抵消，等于原始块的均值"""
    by_origin = {b.origin: b for b in blocks}
    for c in range(num_clients):
        if c not in by_origin:
            raise MissingClient(c)
    ordered = [by_origin[c] for c in range(num_clients)]
    n = ordered[0].values.size
    for b in ordered[1:]:
        if b.values.size != n:
            raise LengthMismatch(n, b.values.size)
    total = np.zeros(n)
    for b in ordered:
        total += b.values
    return ParameterBlock(ordered[0].k, total / num_clients)


def assemble(blocks: Mapping[int, ParameterBlock]) -> np.ndarray:
    return np.concatenate([blocks[k].values for k in sorted(blocks)])


@dataclass
class AggregationTranscript:
    """一轮中所有经过网络的帧，供隐私审计"""
    masked: List[Frame] = field(default_factory=list)
    broadcast: List[Frame] = field(default_factory=list)

    @property
    def frames(self) -> List[Frame]:
        return self.masked + self.broadcast


def round_keys(num_clients: int, length: int, session_seed: int, round_index: int) -> Dict[int, KeyRing]:
    """每一块一套密钥，由 (session_seed, round, block) 派生"""
    size = block_size(length, num_clients)
    n_blocks = int(math.ceil(length / size))
    return {k: gen_pairwise_keys(num_clients, size, session_seed, round_index, k) for k in range(n_blocks)}


def run_aggregation_round(per_client: Sequence[np.ndarray], session_seed: int, round_index: int = 0,
                          key_source: Optional[Callable[[int, int], Dict[int, KeyRing]]] = None,
                          ) -> Tuple[List[np.ndarray], AggregationTranscript]:
    """单线程跑完一轮：掩码 → 客户端 k 聚合第 k 块 → 广播；返回各客户端新参数与消息记录"""
    n = len(per_client)
    lengths = {np.asarray(p).size for p in per_client}
    if len(lengths) != 1:
        a, b = sorted(lengths)[:2]
        raise LengthMismatch(a, b)
    length = lengths.pop()
    keyrings = key_source(n, length) if key_source else round_keys(n, length, session_seed, round_index)
    transcript = AggregationTranscript()

    inbox: Dict[int, List[MaskedBlock]] = {}
    for i, params in enumerate(per_client):
        for block in partition_params(params, n):
            masked = mask_block(block, i, keyrings[block.k])
            inbox.setdefault(block.k, []).append(masked)
            transcript.masked.append(Frame(round_index, block.k, i, masked.values))

    aggregated: Dict[int, ParameterBlock] = {}
    for k in sorted(inbox):
        aggregated[k] = aggregate_masked(inbox[k], n)
        for _ in range(n):
            transcript.broadcast.append(Frame(round_index, k, k, aggregated[k].values))
    result = assemble(aggregated)
    logger.debug(f"round {round_index}: {n} clients, {len(aggregated)} blocks of length ≤ {block_size(length, n)}")
    return [result.copy() for _ in range(n)], transcript
