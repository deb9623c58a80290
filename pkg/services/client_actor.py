"""客户端 actor - 编码跨客户端点并上传、接收 LLM 结果、三目标并行训练 SLM 与 TPA、回传 LoRA、秘密共享聚合 TPA"""

from typing import Dict, Optional

import numpy as np

from core import autodiff as ad
from core.comm_ledger import CommLedger, Direction, Kind
from core.errors import LengthMismatch
from core.fpo import (
    ClientObjectives,
    FreezeSchedule,
    balanced_batch,
    is_frozen,
    multi_task_loss,
    sample_batch,
    weighted,
)
from core.optim import Adam
from core.settings import RunConfig
from core.state_machine import ActorPhase
from core.surrogate import (
    ModelConfig,
    SurrogateModel,
    build_slm_from_bundle,
    dense_param_names,
    install_adapter,
    trainable_params,
)
from core.task_data import ClientShard, FederatedDataset, raw_embeddings
from core.tasks import TaskKind
from core.tke import ChangeRateTracker, SelectionPlan, n_selected, reverse_kl_loss, select_layers
from core.tpa import EMBED_DIM, EmbeddingBatch, PointKey, TpaParams, encode_batch, recon_loss, reconstruct
from core.wire import SERVER_ID
from services.base_actor import BaseActor
from services.network import Envelope, MessageKind, Network
from services.secure_aggregator import SecureAggregator


class ClientActor(BaseActor):
    """持有 SLM 与 TPA；只上传跨客户端条目所需的点嵌入"""

    def __init__(self, client_id: int, shard: ClientShard, slm_config: ModelConfig, dataset: FederatedDataset,
                 cfg: RunConfig, network: Network, ledger: CommLedger, tpa: TpaParams, seed: int,
                 session_seed: int):
        super().__init__(f"client-{client_id}", client_id, network, ledger, cfg.rounds)
        self.client_id = client_id
        self.shard = shard
        self.slm_config = slm_config
        self.dataset = dataset
        self.cfg = cfg
        self.tpa = tpa
        self.seed = seed
        self.schedule = FreezeSchedule(cfg.fpo.period)
        self.objectives = ClientObjectives.from_weights(cfg.fpo.client_weights)
        self.slm_optimizer = Adam(cfg.fpo.lr)
        self.tpa_optimizer = Adam(cfg.fpo.tpa_lr)
        self.rng = np.random.default_rng(seed)
        self.aggregator = SecureAggregator(client_id, cfg.clients, network, session_seed, ledger)
        self.slm: Optional[SurrogateModel] = None
        self.tracker: Optional[ChangeRateTracker] = None
        # 最近一次新鲜轮收到的 LLM 结果：task -> point_key -> 分布
        self.llm_rows: Dict[TaskKind, Dict[PointKey, np.ndarray]] = {}
        self.uploads: Dict[int, int] = {}
        self.n_items = sum(len(items) for items in shard.items.values())

    def setup(self) -> None:
        """接收首次下发的完整适配器，构造 θ_SLM"""
        bundle = self.network.recv(self.client_id, SERVER_ID, MessageKind.ADAPTER, 0).payload
        self.slm = build_slm_from_bundle(bundle, self.slm_config, self.seed)
        self.tracker = ChangeRateTracker(self.slm.adapter_ids)
        self.logger.info(f"{len(self.shard.subs)} sub-trajectories, {len(self.shard.upload_keys)} "
                         f"cross-client points, {self.n_items} items")

    def run_round(self, round_index: int) -> None:
        fresh = not is_frozen(round_index, self.schedule)
        if fresh:
            self.state.transition(ActorPhase.UPLOADING, f"round {round_index} fresh")
            self._upload(round_index)
            self._receive_results(round_index)
        else:
            self.uploads[round_index] = 0

        self.state.transition(ActorPhase.TRAINING, f"round {round_index}")
        plan, losses = self._train(round_index)
        losses.update({"round": round_index, "fresh": float(fresh)})
        self.losses.append(losses)

        self.state.transition(ActorPhase.AGGREGATING, f"round {round_index}")
        self._send_lora(round_index, plan)
        self._install(round_index)
        if fresh and self.cfg.fpo.use_tpa:
            self.tpa = TpaParams.from_flat(self.aggregator.run(round_index, self.tpa.flatten()), self.dataset.norm)
        self.state.transition(ActorPhase.IDLE, f"round {round_index} done")

    # ---------- 数据交换 ----------
    def _embed(self) -> np.ndarray:
        points = self.shard.upload_points
        if not self.cfg.fpo.use_tpa:
            return raw_embeddings(points, self.dataset.norm)
        if not points:
            return np.zeros((0, EMBED_DIM))
        return encode_batch(points, self.tpa)

    def _upload(self, round_index: int) -> None:
        rows = self._embed()
        batch = EmbeddingBatch(self.client_id, self.shard.upload_keys, rows)
        requests = self.shard.cross_requests()
        slm_rows = {}
        for task, items in self.shard.items.items():
            cross = items.cross_idx
            token_range = self.dataset.vocab.token_range(task)
            slm_rows[task] = (self.slm.forward(items.features[cross], token_range) if cross.size
                              else np.zeros((0, token_range[1] - token_range[0])))
        payload = {"batch": batch, "requests": requests, "slm": slm_rows}
        self.network.send(self.client_id, SERVER_ID, Envelope(MessageKind.EMBED, round_index, self.client_id, payload))
        self.ledger.record(round_index, Direction.UP, Kind.EMBEDDING, rows.size)
        self.ledger.record(round_index, Direction.UP, Kind.RESULT, sum(r.size for r in slm_rows.values()))
        self.uploads[round_index] = len(batch)

    def _receive_results(self, round_index: int) -> None:
        results = self.network.recv(self.client_id, SERVER_ID, MessageKind.RESULT, round_index).payload
        requests = self.shard.cross_requests()
        self.llm_rows = {}
        for task, batch in results.items():
            if len(batch) != len(requests.get(task, ())):
                raise LengthMismatch(len(batch), len(requests.get(task, ())))
            self.llm_rows[task] = dict(zip(batch.keys, batch.rows))

    # ---------- 训练 ----------
    def _train(self, round_index: int):
        slm = self.slm
        self.tracker.observe({i: slm.layer(i).lora_vector() for i in slm.adapter_ids})
        n_m = n_selected(self.cfg.m, len(slm.adapter_ids))
        plan = select_layers(self.tracker.ratios(), n_m, self.rng, round_index, slm.adapter_ids)
        self.plans.append(plan)

        names = ["stem.W", "stem.b"]
        if self.cfg.fpo.train_foundation:
            names += dense_param_names(slm, slm.foundation_ids)
        names += list(trainable_params(slm, plan.selected).names)
        params = slm.params()
        obj = self.objectives
        use_tpa = self.cfg.fpo.use_tpa and bool(self.shard.subs)
        points_x = self.dataset.norm.scale(self.shard.all_points) if use_tpa else None
        bs = self.cfg.fpo.batch_size
        record = {"reconstruction": 0.0, "reverse_kl": 0.0, "task": 0.0, "total": 0.0}

        for _ in range(self.cfg.fpo.local_steps):
            leaves = {n: ad.Tensor(params[n], requires_grad=True) for n in names}
            per_task = {}
            kl_sum, ce_sum = 0.0, 0.0
            for task, items in self.shard.items.items():
                token_range = self.dataset.vocab.token_range(task)
                parts = []
                local = items.local_idx
                if local.size:
                    idx = local[balanced_batch(items.labels[local], bs, self.rng)]
                    out = slm.forward_tensor(ad.Tensor(items.features[idx]), leaves, token_range)
                    ce = ad.cross_entropy(out, items.labels[idx])
                    parts.append(weighted(ce, obj.task))
                    ce_sum += ce.item()
                known = self.llm_rows.get(task, {})
                cross = np.array([i for i in items.cross_idx if items.keys[i] in known], dtype=np.int64)
                if cross.size:
                    idx = cross[sample_batch(cross.size, bs, self.rng)]
                    out = slm.forward_tensor(ad.Tensor(items.features[idx]), leaves, token_range)
                    target = np.stack([known[items.keys[i]] for i in idx])
                    kl = reverse_kl_loss(out, ad.Tensor(target))
                    parts.append(weighted(kl, obj.reverse_kl))
                    kl_sum += kl.item()
                if parts:
                    per_task[task] = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])

            tpa_leaves = {}
            recon = None
            if use_tpa:
                tpa_leaves = {n: ad.Tensor(a, requires_grad=True) for n, a in self.tpa.arrays.items()}
                xb = points_x[sample_batch(len(points_x), self.cfg.fpo.tpa_batch_size, self.rng)]
                recon = recon_loss(reconstruct(ad.Tensor(xb), tpa_leaves), xb)

            if not per_task and recon is None:
                break
            total = multi_task_loss(per_task) if per_task else None
            if recon is not None:
                term = weighted(recon, obj.reconstruction)
                total = term if total is None else ad.add(total, term)
            grads = ad.backward(total)
            self.slm_optimizer.step({n: params[n] for n in names}, {n: grads.of(leaves[n]) for n in names})
            if tpa_leaves:
                self.tpa_optimizer.step(self.tpa.arrays, {n: grads.of(t) for n, t in tpa_leaves.items()})
            record = {"reconstruction": recon.item() if recon is not None else 0.0,
                      "reverse_kl": kl_sum, "task": ce_sum, "total": total.item()}
        return plan, record

    # ---------- LoRA 回传 / 适配器装入 ----------
    def _send_lora(self, round_index: int, plan: SelectionPlan) -> None:
        adapter_ids = self.slm.adapter_ids
        layers = {}
        for layer_id in plan.selected:
            layer = self.slm.layer(layer_id)
            layers[adapter_ids.index(layer_id)] = (layer.lora_A.copy(), layer.lora_B.copy())
        payload = {"version": self.slm.adapter_version, "n": max(self.n_items, 1), "layers": layers}
        self.network.send(self.client_id, SERVER_ID, Envelope(MessageKind.LORA, round_index, self.client_id, payload))
        self.ledger.record(round_index, Direction.UP, Kind.LORA, sum(A.size + B.size for A, B in layers.values()))

    def _install(self, round_index: int) -> None:
        bundle = self.network.recv(self.client_id, SERVER_ID, MessageKind.ADAPTER, round_index).payload
        install_adapter(self.slm, bundle, lora_only=True)
        for layer_id in self.slm.adapter_ids:
            self.slm_optimizer.reset(f"layer{layer_id}.lora_A")
            self.slm_optimizer.reset(f"layer{layer_id}.lora_B")
