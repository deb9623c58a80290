"""联邦并行优化 - 冻结调度、客户端/服务端目标函数、多任务损失、训练驱动与评估"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from core import autodiff as ad
from core.checkpoint import save_model, save_tpa
from core.comm_ledger import EVAL, CommLedger, Direction, Kind
from core.errors import ActorFailure, InvariantViolation, LengthMismatch
from core.run_logger import get_logger
from core.settings import RunConfig
from core.surrogate import SurrogateModel
from core.task_data import (
    ClientShard,
    FederatedDataset,
    build_shards,
    client_input_dim,
    generate_dataset,
    is_classification,
    raw_embeddings,
    server_context,
    server_features,
    server_input_dim,
    server_prompt,
)
from core.tasks import MetricReport, TaskKind, f1_score, oracle_simplify, sed
from core.tke import SelectionPlan, enhance_result
from core.tpa import EMBED_DIM, EmbeddingBatch, TpaParams, encode_batch, split_results, union_embeddings
from core.trajectory import Trajectory
from core.vocab import KEEP

logger = get_logger("FPO")


# ========== 冻结调度 ==========
@dataclass(frozen=True)
class FreezeSchedule:
    """第 r 轮冻结当且仅当 r mod period ≠ 0；第 0 轮总是新鲜数据"""
    period: int = 2

    def __post_init__(self):
        if self.period < 1:
            raise InvariantViolation(f"freeze period must be ≥ 1, got {self.period}")


def is_frozen(r: int, schedule: FreezeSchedule) -> bool:
    if r < 0:
        raise InvariantViolation(f"round index must be ≥ 0, got {r}")
    return r % schedule.period != 0


# ========== 目标函数 ==========
@dataclass(frozen=True)
class ClientObjectives:
    """ℒ1 TPA 重建，ℒ2 反向 KL（SLM 对 LLM），ℒ3 任务交叉熵"""
    reconstruction: float = 1.0
    reverse_kl: float = 1.0
    task: float = 1.0

    def __post_init__(self):
        if min(self.reconstruction, self.reverse_kl, self.task) < 0:
            raise InvariantViolation("objective weights must be ≥ 0")

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "ClientObjectives":
        return cls(*(float(w) for w in weights))


@dataclass(frozen=True)
class ServerObjectives:
    """ℒ1 正向 KL（LLM 对 SLM），ℒ2 任务交叉熵"""
    forward_kl: float = 1.0
    task: float = 1.0

    def __post_init__(self):
        if min(self.forward_kl, self.task) < 0:
            raise InvariantViolation("objective weights must be ≥ 0")

    @classmethod
    def from_weights(cls, weights: Sequence[float]) -> "ServerObjectives":
        return cls(*(float(w) for w in weights))


Loss = Union[float, ad.Tensor]


def multi_task_loss(losses: Mapping[TaskKind, Loss], tasks: Optional[Sequence[TaskKind]] = None) -> Loss:
    """配置任务的损失无权重求和；未配置的任务不计入"""
    chosen = [losses[t] for t in (tasks if tasks is not None else losses) if t in losses]
    if not chosen:
        raise InvariantViolation("multi-task loss needs at least one task")
    if any(isinstance(l, ad.Tensor) for l in chosen):
        total = chosen[0] if isinstance(chosen[0], ad.Tensor) else ad.Tensor(np.asarray(chosen[0], dtype=np.float64))
        for l in chosen[1:]:
            total = ad.add(total, l if isinstance(l, ad.Tensor) else ad.Tensor(np.asarray(l, dtype=np.float64)))
        return total
    return float(sum(chosen))


def weighted(loss: ad.Tensor, weight: float) -> ad.Tensor:
    return loss if weight == 1.0 else ad.scale(loss, weight)


def sample_batch(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    if n <= size:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def balanced_batch(labels: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """按类别频率的倒数抽样（有放回），少数类不会被淹没"""
    labels = np.asarray(labels)
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    _, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    weights = 1.0 / counts[inverse]
    weights = weights / weights.sum()
    return np.sort(rng.choice(labels.size, size=size, replace=True, p=weights))


# ========== 训练结果 ==========
@dataclass
class TrainedState:
    llm: SurrogateModel
    slms: Dict[int, SurrogateModel]
    tpas: Dict[int, TpaParams]


@dataclass
class TrainingResult:
    reports: List[MetricReport]
    ledger: CommLedger
    checkpoints: Dict[str, str]
    losses: Dict[str, List[Dict[str, float]]] = field(default_factory=dict)
    plans: Dict[str, List[SelectionPlan]] = field(default_factory=dict)
    timings: Dict[str, List[float]] = field(default_factory=dict)
    state: Optional[TrainedState] = None
    dataset: Optional[FederatedDataset] = None


def run_training(cfg: RunConfig, dataset: Optional[FederatedDataset] = None,
                 out_dir: Optional[Union[str, Path]] = None) -> TrainingResult:
    """一个服务端 actor + clients 个客户端 actor 跑 TR 轮，然后在测试集上评估"""
    from core.wire import TraceWriter
    from services.actor_factory import ActorFactory
    from services.network import Network

    dataset = dataset or generate_dataset(cfg)
    train_tasks = cfg.tasks.train
    shards = build_shards(dataset.train, dataset, train_tasks, cfg.clients, cfg.derive_seed(5))
    llm_cfg, slm_cfg = cfg.model_configs(dataset.vocab.size, server_input_dim(), client_input_dim())

    ledger = CommLedger()
    trace = None
    out_path = Path(out_dir or cfg.output.out_dir)
    if cfg.output.trace:
        trace = TraceWriter(out_path / "secagg.trace")
    network = Network.for_clients(cfg.clients, timeout=cfg.fpo.timeout, trace=trace)
    factory = ActorFactory(cfg, dataset, network, ledger)
    server = factory.create_server(llm_cfg, shards)
    clients = [factory.create_client(cid, shards[cid], slm_cfg) for cid in range(cfg.clients)]
    actors = [server] + clients

    logger.info(f"training: {cfg.clients} clients, {cfg.rounds} rounds, tasks "
                f"{','.join(t.value for t in train_tasks)}, m={cfg.m}, period={cfg.fpo.period}")
    started = time.perf_counter()
    try:
        for actor in actors:
            actor.start()
        for actor in actors:
            actor.join()
    finally:
        if trace is not None:
            trace.close()
    failures = {a.name: a.error for a in actors if a.error is not None}
    if failures:
        raise ActorFailure(failures)
    logger.info(f"training finished in {time.perf_counter() - started:.1f}s")

    state = TrainedState(server.llm, {c.client_id: c.slm for c in clients},
                         {c.client_id: c.tpa for c in clients})
    reports = evaluate(state, dataset, cfg, ledger)

    checkpoints: Dict[str, str] = {}
    if cfg.output.save_checkpoints:
        ckpt_dir = out_path / "checkpoints"
        save_model(state.llm, ckpt_dir / "llm.bin")
        checkpoints["llm"] = str(ckpt_dir / "llm.bin")
        for cid in sorted(state.slms):
            save_model(state.slms[cid], ckpt_dir / f"slm-{cid}.bin")
            save_tpa(state.tpas[cid], ckpt_dir / f"tpa-{cid}.bin")
            checkpoints[f"slm-{cid}"] = str(ckpt_dir / f"slm-{cid}.bin")
            checkpoints[f"tpa-{cid}"] = str(ckpt_dir / f"tpa-{cid}.bin")

    return TrainingResult(
        reports=reports, ledger=ledger, checkpoints=checkpoints,
        losses={a.name: a.losses for a in actors},
        plans={a.name: a.plans for a in actors},
        timings={a.name: a.round_times for a in actors},
        state=state, dataset=dataset,
    )


# ========== 评估 ==========
@dataclass
class Predictions:
    keys: List = field(default_factory=list)
    probs: List[np.ndarray] = field(default_factory=list)
    gold: List[int] = field(default_factory=list)
    cross: List[bool] = field(default_factory=list)


def _exchange(state: TrainedState, dataset: FederatedDataset, shards: Mapping[int, ClientShard],
              tasks: Sequence[TaskKind], cfg: RunConfig, ledger: CommLedger) -> Dict[int, Dict[TaskKind, Dict]]:
    """评估时的一次上传/下发（记入 eval 账目），返回每个客户端每个任务的 LLM 结果"""
    batches = []
    for cid in sorted(shards):
        shard = shards[cid]
        if cfg.fpo.use_tpa:
            rows = encode_batch(shard.upload_points, state.tpas[cid]) if shard.upload_points \
                else np.zeros((0, EMBED_DIM))
        else:
            rows = raw_embeddings(shard.upload_points, dataset.norm)
        batches.append(EmbeddingBatch(cid, shard.upload_keys, rows))
        ledger.record(0, Direction.UP, Kind.EMBEDDING, rows.size, EVAL)
    union = union_embeddings(batches)
    context = server_context(union, dataset.norm)
    out: Dict[int, Dict[TaskKind, Dict]] = {cid: {} for cid in shards}
    per_client_floats = {cid: 0 for cid in shards}
    for task in tasks:
        keys, ownership = [], {}
        for cid in sorted(shards):
            for key in shards[cid].cross_requests()[task]:
                keys.append(key)
                ownership[key] = cid
        if not keys:
            continue
        feats = server_features(task, keys, union, context,
                                server_prompt(task, union, dataset.road, dataset.norm))
        probs = state.llm.forward(feats, dataset.vocab.token_range(task))
        for cid, batch in split_results(keys, probs, ownership, sorted(shards)).items():
            out[cid][task] = dict(zip(batch.keys, batch.rows))
            per_client_floats[cid] += batch.rows.size
    for cid in sorted(shards):
        ledger.record(0, Direction.DOWN, Kind.RESULT, per_client_floats[cid], EVAL)
    return out


def collect_predictions(state: TrainedState, dataset: FederatedDataset, shards: Mapping[int, ClientShard],
                        tasks: Sequence[TaskKind], cfg: RunConfig,
                        ledger: CommLedger) -> Dict[TaskKind, Predictions]:
    """本地条目用 SLM，跨客户端条目用 SLM 与 LLM 结果的增强组合"""
    llm_results = _exchange(state, dataset, shards, tasks, cfg, ledger)
    preds = {task: Predictions() for task in tasks}
    for cid in sorted(shards):
        slm = state.slms[cid]
        for task in tasks:
            items = shards[cid].items[task]
            if not len(items):
                continue
            probs = slm.forward(items.features, dataset.vocab.token_range(task))
            results = llm_results[cid].get(task, {})
            for i in items.cross_idx:
                llm_row = results.get(items.keys[i])
                if llm_row is not None:
                    probs[i] = enhance_result(probs[i], llm_row, cfg.tke.enhance_weight)
            p = preds[task]
            p.keys.extend(items.keys)
            p.probs.extend(probs)
            p.gold.extend(int(g) for g in items.gold)
            p.cross.extend(bool(c) for c in items.cross)
    return preds


def matched_compression(traj: Trajectory, keep_prob: Mapping[int, float], k: int) -> Trajectory:
    """按保留概率取前 k 个点（强制保留两端），得到与 oracle 压缩率相同的简化轨迹"""
    n = len(traj)
    k = min(max(k, 2), n)
    interior = sorted(range(1, n - 1), key=lambda i: (-keep_prob.get(traj.points[i].t, 0.0), i))
    chosen = sorted({0, n - 1, *interior[:max(k - 2, 0)]})
    return Trajectory(traj.traj_id, traj.user_id, [traj.points[i] for i in chosen])


def _simplification_report(task: TaskKind, preds: Predictions, trajs: Sequence[Trajectory],
                           cfg: RunConfig, seen: bool) -> MetricReport:
    keep_prob: Dict[str, Dict[int, float]] = {}
    for (parent, t), prob in zip(preds.keys, preds.probs):
        keep_prob.setdefault(parent, {})[t] = float(prob[KEEP])
    model_seds, oracle_seds = [], []
    for traj in trajs:
        if len(traj) < 3 or traj.traj_id not in keep_prob:
            continue
        oracle = oracle_simplify(traj, cfg.tasks.simplify_eps).trajectory
        model = matched_compression(traj, keep_prob[traj.traj_id], len(oracle))
        model_seds.append(sed(model, traj))
        oracle_seds.append(sed(oracle, traj))
    model_sed = float(np.mean(model_seds)) if model_seds else 0.0
    oracle_sed = float(np.mean(oracle_seds)) if oracle_seds else 0.0
    pred = [int(np.argmax(p)) for p in preds.probs]
    extra = {
        "oracle_sed": oracle_sed,
        "sed_ratio": model_sed / oracle_sed if oracle_sed > 0 else (1.0 if model_sed == 0 else float("inf")),
        "keep_f1": f1_score(pred, preds.gold, cfg.tasks.f1_average) if pred else 0.0,
        "seen": 1.0 if seen else 0.0,
    }
    return MetricReport(task, sed=model_sed, support=len(model_seds), extra=extra)


def evaluate(state: TrainedState, dataset: FederatedDataset, cfg: RunConfig,
             ledger: Optional[CommLedger] = None, tasks: Optional[Sequence[TaskKind]] = None) -> List[MetricReport]:
    """在测试集上评估已训练任务与未见任务"""
    tasks = tuple(tasks or cfg.tasks.all)
    ledger = ledger if ledger is not None else CommLedger()
    shards = build_shards(dataset.test, dataset, tasks, cfg.clients, cfg.derive_seed(5))
    preds = collect_predictions(state, dataset, shards, tasks, cfg, ledger)
    reports = []
    for task in tasks:
        p = preds[task]
        seen = task in cfg.tasks.train
        if not p.gold:
            logger.warning(f"{task.value}: no test items")
            continue
        if task is TaskKind.TSim:
            reports.append(_simplification_report(task, p, dataset.test, cfg, seen))
            continue
        pred = [int(np.argmax(row)) for row in p.probs]
        if len(pred) != len(p.gold):
            raise LengthMismatch(len(pred), len(p.gold))
        baseline = f1_score([1] * len(p.gold), p.gold, cfg.tasks.f1_average)
        extra = {
            "baseline_f1": baseline,
            "cross_fraction": float(np.mean(p.cross)),
            "seen": 1.0 if seen else 0.0,
        }
        if is_classification(task):
            extra["accuracy"] = float(np.mean(np.array(pred) == np.array(p.gold)))
        reports.append(MetricReport(task, f1=f1_score(pred, p.gold, cfg.tasks.f1_average),
                                    support=len(p.gold), extra=extra))
    for r in reports:
        value = f"f1={r.f1:.4f}" if r.f1 is not None else f"sed={r.sed:.2f}m"
        logger.info(f"eval {r.task.value}: {value} (n={r.support})")
    return reports
