"""参与方工厂 - 按运行配置统一创建服务端与客户端 actor"""

from typing import Mapping, Optional

from core.comm_ledger import CommLedger
from core.settings import RunConfig
from core.surrogate import ModelConfig, build_llm, check_compatible
from core.task_data import ClientShard, FederatedDataset, LabelOracle
from core.tpa import TpaParams
from services.client_actor import ClientActor
from services.network import Network
from services.server_actor import ServerActor

# 种子派生标签
SEED_TPA = 3
SEED_LLM = 4
SEED_SESSION = 8
SEED_SERVER = 9
SEED_CLIENT = 10


class ActorFactory:
    """参与方工厂"""

    def __init__(self, cfg: RunConfig, dataset: FederatedDataset, network: Network, ledger: CommLedger):
        self.cfg = cfg
        self.dataset = dataset
        self.network = network
        self.ledger = ledger
        self._llm_config: Optional[ModelConfig] = None

    def create_server(self, llm_config: ModelConfig,
                      shards: Optional[Mapping[int, ClientShard]] = None) -> ServerActor:
        """服务端持有训练集整条轨迹上的 oracle 标签，仅供其任务损失使用"""
        cfg = self.cfg
        self._llm_config = llm_config
        llm = build_llm(llm_config, cfg.derive_seed(SEED_LLM))
        oracle = LabelOracle(self.dataset.train, self.dataset.ctx, cfg.tasks.train)
        clients = sorted(shards) if shards is not None else list(range(cfg.clients))
        return ServerActor(llm, self.dataset, oracle, cfg, self.network, self.ledger, clients,
                           cfg.derive_seed(SEED_SERVER))

    def create_client(self, client_id: int, shard: ClientShard, slm_config: ModelConfig) -> ClientActor:
        cfg = self.cfg
        if self._llm_config is not None:
            check_compatible(self._llm_config, slm_config)
        # 所有客户端的 TPA 初始值相同，秘密共享聚合求的是同一模型的均值
        tpa = TpaParams.init(cfg.derive_seed(SEED_TPA), self.dataset.norm)
        return ClientActor(client_id, shard, slm_config, self.dataset, cfg, self.network, self.ledger, tpa,
                           cfg.derive_seed(SEED_CLIENT, client_id), cfg.derive_seed(SEED_SESSION))
