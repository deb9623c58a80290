import numpy as np
import pytest

from core.checkpoint import (
    CheckpointManager,
    load_into_model,
    load_tpa,
    manifest_path,
    save_model,
    save_tpa,
)
from core.errors import LengthMismatch, ParseError
from core.surrogate import ModelConfig, build_llm
from core.tpa import Normalization, TpaParams

CFG = ModelConfig(n_layers=3, width=6, vocab_size=7, lora_rank=2, adapter_depth=1, input_dim=4)
NORM = Normalization((116.30, 39.90, 116.40, 39.98), 0, 1000)


def test_model_roundtrip_and_manifest(tmp_path):
    model = build_llm(CFG, seed=1)
    model.layer(2).lora_B[...] = 0.25
    path = tmp_path / "llm.bin"
    save_model(model, path)
    assert path.stat().st_size == 8 * sum(a.size for a in model.params().values())

    lines = manifest_path(path).read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# llm n_layers=3 width=6 vocab=7 rank=2")
    assert "layer0.lora_A 2x6 rank=2" in lines
    assert "layer0.lora_B 6x2 rank=2" in lines
    assert "stem.W 6x4 rank=0" in lines

    other = build_llm(CFG, seed=2)
    load_into_model(other, path)
    for name, arr in model.params().items():
        np.testing.assert_array_equal(other.params()[name], arr)


def test_loading_into_a_different_structure_fails(tmp_path):
    path = tmp_path / "llm.bin"
    save_model(build_llm(CFG, seed=1), path)
    bigger = build_llm(ModelConfig(n_layers=4, width=6, vocab_size=7, lora_rank=2, adapter_depth=1,
                                   input_dim=4), seed=1)
    with pytest.raises(LengthMismatch):
        load_into_model(bigger, path)


def test_truncated_payload_is_detected(tmp_path):
    path = tmp_path / "llm.bin"
    save_model(build_llm(CFG, seed=1), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(LengthMismatch):
        CheckpointManager(path).load()


def test_malformed_manifest_line(tmp_path):
    manager = CheckpointManager(tmp_path / "x.bin")
    manager.save({"a": np.zeros(2)})
    manifest_path(manager.path).write_text("a\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        manager.read_manifest()
    assert exc.value.line == 1


def test_scalar_and_empty_arrays(tmp_path):
    manager = CheckpointManager(tmp_path / "s.bin")
    manager.save({"scale": np.array(1.5), "v": np.arange(3.0)})
    back = manager.load()
    assert back["scale"].shape == () and back["scale"] == 1.5
    np.testing.assert_array_equal(back["v"], [0.0, 1.0, 2.0])
    empty = CheckpointManager(tmp_path / "e.bin")
    empty.save({})
    assert empty.load() == {}


def test_tpa_roundtrip(tmp_path):
    params = TpaParams.init(4, NORM)
    save_tpa(params, tmp_path / "tpa.bin")
    back = load_tpa(tmp_path / "tpa.bin", NORM)
    np.testing.assert_array_equal(back.flatten(), params.flatten())
