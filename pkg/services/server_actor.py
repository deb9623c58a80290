"""服务端 actor - 合并嵌入、LLM 推理并下发结果、正向 KL + 任务损失训练、回收并重新下发适配器"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from core import autodiff as ad
from core.comm_ledger import CommLedger, Direction, Kind
from core.errors import InvariantViolation, MissingBatch, StaleVersion
from core.fpo import FreezeSchedule, ServerObjectives, balanced_batch, is_frozen, multi_task_loss, weighted
from core.optim import Adam
from core.settings import RunConfig
from core.state_machine import ActorPhase
from core.surrogate import AdapterBundle, SurrogateModel, dispatch_adapter, return_adapter, trainable_params
from core.task_data import FederatedDataset, LabelOracle, server_context, server_features, server_prompt
from core.tasks import TaskKind
from core.tke import ChangeRateTracker, forward_kl_loss, n_selected, select_layers
from core.tpa import EmbeddingBatch, EmbeddingUnion, PointKey, split_results, union_embeddings
from core.wire import SERVER_ID
from services.base_actor import BaseActor
from services.network import Envelope, MessageKind, Network


@dataclass
class ServerTaskData:
    keys: List[PointKey]
    owners: Dict[PointKey, int]
    features: np.ndarray
    slm_rows: np.ndarray
    labels: np.ndarray


@dataclass
class ServerRoundData:
    """最近一次新鲜轮收到的数据；冻结轮原样复用"""
    round: int
    union: EmbeddingUnion
    tasks: Dict[TaskKind, ServerTaskData] = field(default_factory=dict)


class ServerActor(BaseActor):
    """持有 LLM；每轮按冻结状态决定是否交换数据"""

    def __init__(self, llm: SurrogateModel, dataset: FederatedDataset, oracle: LabelOracle, cfg: RunConfig,
                 network: Network, ledger: CommLedger, clients: Sequence[int], seed: int):
        super().__init__("server", SERVER_ID, network, ledger, cfg.rounds)
        self.llm = llm
        self.dataset = dataset
        self.oracle = oracle
        self.cfg = cfg
        self.clients = list(clients)
        self.tasks = tuple(cfg.tasks.train)
        self.schedule = FreezeSchedule(cfg.fpo.period)
        self.objectives = ServerObjectives.from_weights(cfg.fpo.server_weights)
        self.optimizer = Adam(cfg.fpo.lr)
        self.tracker = ChangeRateTracker(llm.layer_ids)
        self.rng = np.random.default_rng(seed)
        self.bundle: Optional[AdapterBundle] = None
        self.stored: Optional[ServerRoundData] = None
        self.result_messages: Dict[int, int] = {}

    # ---------- 适配器 ----------
    def setup(self) -> None:
        """首轮前向每个客户端完整下发适配器"""
        self.bundle = dispatch_adapter(self.llm)
        for c in self.clients:
            self.network.send(SERVER_ID, c, Envelope(MessageKind.ADAPTER, 0, SERVER_ID, self.bundle.copy()))
            self.ledger.record(0, Direction.DOWN, Kind.ADAPTER, self.bundle.full_floats())
        self.logger.info(f"dispatched adapter v{self.bundle.version} "
                         f"({self.bundle.full_floats()} floats) to {len(self.clients)} clients")

    def run_round(self, round_index: int) -> None:
        fresh = not is_frozen(round_index, self.schedule)
        if fresh:
            self.state.transition(ActorPhase.UPLOADING, f"round {round_index} fresh")
            self.stored = self._collect(round_index)
            self._respond(round_index)
        elif self.stored is None:
            raise InvariantViolation(f"round {round_index} is frozen but no data was ever received")
        else:
            self.result_messages[round_index] = 0

        self.state.transition(ActorPhase.TRAINING, f"round {round_index}")
        losses = self._train(round_index)
        losses.update({"round": round_index, "fresh": float(fresh)})
        self.losses.append(losses)

        self.state.transition(ActorPhase.AGGREGATING, f"round {round_index}")
        self._aggregate(round_index)
        self.state.transition(ActorPhase.IDLE, f"round {round_index} done")
        self.logger.debug(f"round {round_index}: total={losses.get('total', 0.0):.4f}")

    # ---------- 数据交换 ----------
    def _collect(self, round_index: int) -> ServerRoundData:
        payloads = []
        for c in self.clients:
            envelope = self.network.recv(SERVER_ID, c, MessageKind.EMBED, round_index)
            if not isinstance(envelope.payload, dict) or "batch" not in envelope.payload:
                raise MissingBatch(c)
            payloads.append(envelope.payload)
        union = union_embeddings([p["batch"] for p in payloads])
        context = server_context(union, self.dataset.norm)
        data = ServerRoundData(round_index, union)
        for task in self.tasks:
            keys: List[PointKey] = []
            owners: Dict[PointKey, int] = {}
            slm_parts = []
            for c, payload in zip(self.clients, payloads):
                requested = list(payload["requests"].get(task, ()))
                keys.extend(requested)
                owners.update({k: c for k in requested})
                slm_parts.append(np.asarray(payload["slm"][task]).reshape(len(requested), -1))
            n_classes = self.dataset.vocab.n_classes(task)
            prompt = server_prompt(task, union, self.dataset.road, self.dataset.norm)
            data.tasks[task] = ServerTaskData(
                keys, owners,
                server_features(task, keys, union, context, prompt),
                np.vstack(slm_parts) if keys else np.zeros((0, n_classes)),
                self.oracle.labels(task, keys),
            )
        self.logger.debug(f"round {round_index}: union of {len(union)} embeddings from {len(payloads)} clients")
        return data

    def _respond(self, round_index: int) -> None:
        """每个客户端恰好一条结果消息"""
        per_client: Dict[int, Dict[TaskKind, EmbeddingBatch]] = {c: {} for c in self.clients}
        for task, data in self.stored.tasks.items():
            if not data.keys:
                continue
            probs = self.llm.forward(data.features, self.dataset.vocab.token_range(task))
            for c, batch in split_results(data.keys, probs, data.owners, self.clients).items():
                per_client[c][task] = batch
        for c in self.clients:
            floats = sum(batch.rows.size for batch in per_client[c].values())
            self.network.send(SERVER_ID, c, Envelope(MessageKind.RESULT, round_index, SERVER_ID, per_client[c]))
            self.ledger.record(round_index, Direction.DOWN, Kind.RESULT, floats)
        self.result_messages[round_index] = len(self.clients)

    # ---------- 训练 ----------
    def _train(self, round_index: int) -> Dict[str, float]:
        self.tracker.observe({i: self.llm.layer(i).lora_vector() for i in self.llm.layer_ids})
        n_m = n_selected(self.cfg.m, len(self.llm.layer_ids))
        plan = select_layers(self.tracker.ratios(), n_m, self.rng, round_index, self.llm.layer_ids)
        self.plans.append(plan)
        names = ["stem.W", "stem.b"] + list(trainable_params(self.llm, plan.selected).names)
        params = self.llm.params()
        obj = self.objectives
        record = {"forward_kl": 0.0, "task": 0.0, "total": 0.0}
        for _ in range(self.cfg.fpo.server_steps):
            leaves = {n: ad.Tensor(params[n], requires_grad=True) for n in names}
            per_task = {}
            kl_sum, ce_sum = 0.0, 0.0
            for task, data in self.stored.tasks.items():
                if not data.keys:
                    continue
                idx = balanced_batch(data.labels, self.cfg.fpo.batch_size, self.rng)
                out = self.llm.forward_tensor(ad.Tensor(data.features[idx]), leaves,
                                              self.dataset.vocab.token_range(task))
                kl = forward_kl_loss(out, ad.Tensor(data.slm_rows[idx]))
                ce = ad.cross_entropy(out, data.labels[idx])
                per_task[task] = ad.add(weighted(kl, obj.forward_kl), weighted(ce, obj.task))
                kl_sum += kl.item()
                ce_sum += ce.item()
            if not per_task:
                break
            total = multi_task_loss(per_task, self.tasks)
            grads = ad.backward(total)
            self.optimizer.step({n: params[n] for n in names}, {n: grads.of(leaves[n]) for n in names})
            record = {"forward_kl": kl_sum, "task": ce_sum, "total": total.item()}
        return record

    # ---------- 适配器回收 ----------
    def _aggregate(self, round_index: int) -> None:
        updates: Dict[int, list] = {}
        for c in self.clients:
            payload = self.network.recv(SERVER_ID, c, MessageKind.LORA, round_index).payload
            if payload["version"] != self.llm.adapter_version:
                raise StaleVersion(self.llm.adapter_version, payload["version"])
            for a, (A, B) in sorted(payload["layers"].items()):
                updates.setdefault(a, []).append((A, B, payload["n"]))
        return_adapter(self.llm, self.bundle, updates, total_clients=len(self.clients),
                       mode=self.cfg.tke.aggregation)
        for a in updates:
            layer_id = self.llm.adapter_ids[a]
            self.optimizer.reset(f"layer{layer_id}.lora_A")
            self.optimizer.reset(f"layer{layer_id}.lora_B")
        self.bundle = dispatch_adapter(self.llm)
        for c in self.clients:
            self.network.send(SERVER_ID, c, Envelope(MessageKind.ADAPTER, round_index, SERVER_ID, self.bundle.copy()))
            self.ledger.record(round_index, Direction.DOWN, Kind.ADAPTER, self.bundle.lora_floats())
