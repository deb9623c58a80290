import json

import pytest

from core.report import REPORT_NAME, SUMMARY_NAME, TIMING_NAME
from main import CLEAN_CSV, ROAD_CSV, TRAJ_CSV, main

TINY_TOML = """
[run]
clients = 2
rounds = 2
grid = [1, 2]

[dataset]
n_users = 3
n_trajs = 8
points_per_traj = 20
vocab_grid = [4, 4]
road_grid = [3, 3]
n_segment_slots = 4

[llm]
n_layers = 4
width = 16
lora_rank = 2
adapter_depth = 2

[slm]
n_layers = 3

[tke]
m = 0.5

[tpa]
batch_size = 16

[fpo]
local_steps = 2
server_steps = 2
batch_size = 16
timeout = 60.0
"""


@pytest.fixture
def tiny_toml(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return str(path)


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


def test_select_demo_passes(capsys):
    code = main(["select-demo", "--ratios", "0.2,0.3,0.5", "--nm", "2", "--json"])
    payload = _json_out(capsys)
    assert code == 0
    assert payload["pass"] is True
    assert payload["sum"] == pytest.approx(2.0, abs=1e-9)
    assert payload["max_gap"] <= 0.005


def test_select_demo_random_ratios(capsys):
    assert main(["select-demo", "--n", "5", "--nm", "3", "--trials", "50000"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_select_demo_argument_errors(capsys):
    assert main(["select-demo"]) == 1
    assert main(["select-demo", "--ratios", "0.5,0.5", "--nm", "3"]) == 1
    assert main(["select-demo", "--ratios", "0.5,x"]) == 1
    assert main(["select-demo", "--n", "3", "--ratios", "0.5,0.5"]) == 1
    assert "config error" in capsys.readouterr().err


def test_agg_demo_passes(capsys):
    code = main(["agg-demo", "--clients", "4", "--len", "64", "--json"])
    payload = _json_out(capsys)
    assert code == 0
    assert payload["pass"] and payload["clients_agree"]
    assert payload["max_abs_error"] <= 1e-9
    assert main(["agg-demo", "--clients", "0"]) == 1


def test_parse_errors_exit_with_config_code(capsys):
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["agg-demo", "--clients", "many"]) == 1
    assert main(["eval"]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_missing_config_file(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "absent.toml"), "--out", str(tmp_path)]) == 1


def test_non_numeric_corruption_rate_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[corruption.noise]\nrate = \"high\"\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "corruption.noise.rate" in capsys.readouterr().err


def test_report_needs_an_existing_report(tmp_path):
    assert main(["report"]) == 1
    assert main(["report", "--out", str(tmp_path)]) == 1


def test_m_sweep_rejects_out_of_range_m(tmp_path, tiny_toml, capsys):
    assert main(["report", "--config", tiny_toml, "--out", str(tmp_path), "--m-sweep", "0.5,1.5"]) == 1
    assert "tke.m" in capsys.readouterr().err


def test_gen_data_writes_csvs(tmp_path, tiny_toml, capsys):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_toml, "--out", str(out), "--json"]) == 0
    payload = _json_out(capsys)
    for name in (TRAJ_CSV, CLEAN_CSV, ROAD_CSV):
        assert (out / name).exists()
    assert payload["trajectories"] == 8
    assert payload["points"] >= payload["noise_points"] > 0
    assert (out / "launch.log").exists()


def test_train_then_rerender_report(tmp_path, tiny_toml, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_toml, "--out", str(out), "--quiet"]) == 0
    assert "## Metrics" in capsys.readouterr().out
    for name in (REPORT_NAME, SUMMARY_NAME, TIMING_NAME):
        assert (out / name).exists()
    report = json.loads((out / REPORT_NAME).read_text(encoding="utf-8"))
    assert {row["task"] for row in report["metrics"]} == {"NF", "SPD", "TSim"}

    (out / SUMMARY_NAME).unlink()
    assert main(["report", "--out", str(out)]) == 0
    assert (out / SUMMARY_NAME).exists()

    assert main(["eval", "--config", tiny_toml, "--out", str(out), "--checkpoint", str(out / "checkpoints"),
                 "--tasks", "NF,TSeg", "--json"]) == 0
    capsys.readouterr()


def test_train_on_generated_data(tmp_path, tiny_toml, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--config", tiny_toml, "--out", str(data)]) == 0
    out = tmp_path / "run"
    assert main(["train", "--config", tiny_toml, "--out", str(out), "--data", str(data), "--json"]) == 0
    capsys.readouterr()
    assert (out / REPORT_NAME).exists()
    assert main(["train", "--config", tiny_toml, "--out", str(out), "--data", str(tmp_path / "empty")]) == 1
