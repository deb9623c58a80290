"""检查点管理 - 参数以扁平小端 f64 文件保存，旁附文本清单记录张量名、形状与 LoRA 秩"""

from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from core.errors import LengthMismatch, ParseError
from core.run_logger import get_logger
from core.surrogate import SurrogateModel
from core.tpa import TpaParams
from core.wire import F64

logger = get_logger("CKPT")

MANIFEST_SUFFIX = ".manifest.txt"

Manifest = List[Tuple[str, Tuple[int, ...]]]


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def _lora_rank(name: str, shape: Tuple[int, ...]) -> int:
    if name.endswith(".lora_A"):
        return shape[0]
    if name.endswith(".lora_B"):
        return shape[1]
    return 0


class CheckpointManager:
    """按清单顺序读写一组命名数组"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def save(self, arrays: Dict[str, np.ndarray], header: str = "") -> None:
        """保存参数与清单"""
        self.path.parent.mkdir(parents=True, exist_ok=True)
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()]) \
            if arrays else np.zeros(0)
        self.path.write_bytes(flat.astype(F64).tobytes())
        lines = [f"# {header}"] if header else []
        for name, arr in arrays.items():
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name} {shape} rank={_lora_rank(name, arr.shape)}")
        manifest_path(self.path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.debug(f"saved {flat.size} values to {self.path}")

    def read_manifest(self) -> Manifest:
        out: Manifest = []
        text = manifest_path(self.path).read_text(encoding="utf-8")
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise ParseError(line_no, "manifest line needs a name and a shape")
            shape = () if parts[1] == "scalar" else tuple(int(d) for d in parts[1].split("x"))
            out.append((parts[0], shape))
        return out

    def load(self) -> Dict[str, np.ndarray]:
        """按清单切回命名数组"""
        flat = np.frombuffer(self.path.read_bytes(), dtype=F64).astype(np.float64)
        manifest = self.read_manifest()
        expected = sum(int(np.prod(shape)) for _, shape in manifest)
        if flat.size != expected:
            raise LengthMismatch(flat.size, expected)
        out, pos = {}, 0
        for name, shape in manifest:
            size = int(np.prod(shape))
            out[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return out


def save_model(model: SurrogateModel, path: Union[str, Path]) -> None:
    c = model.config
    header = (f"{model.role} n_layers={c.n_layers} width={c.width} vocab={c.vocab_size} "
              f"rank={c.lora_rank} adapter_depth={c.adapter_depth} input_dim={c.input_dim} "
              f"version={model.adapter_version}")
    CheckpointManager(path).save(model.params(), header)


def load_into_model(model: SurrogateModel, path: Union[str, Path]) -> SurrogateModel:
    """把检查点写入结构相同的模型（原地）"""
    arrays = CheckpointManager(path).load()
    params = model.params()
    if list(arrays) != list(params):
        raise LengthMismatch(len(arrays), len(params))
    for name, arr in arrays.items():
        if params[name].shape != arr.shape:
            raise LengthMismatch(arr.size, params[name].size)
        params[name][...] = arr
    return model


def save_tpa(params: TpaParams, path: Union[str, Path]) -> None:
    CheckpointManager(path).save(params.arrays, f"tpa params={TpaParams.param_count()}")


def load_tpa(path: Union[str, Path], norm) -> TpaParams:
    arrays = CheckpointManager(path).load()
    return TpaParams(arrays, norm)
