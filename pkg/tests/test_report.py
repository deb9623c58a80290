import json
from types import SimpleNamespace

from core.comm_ledger import EVAL, CommLedger, Direction, Kind
from core.report import (
    REPORT_NAME,
    SUMMARY_NAME,
    TIMING_NAME,
    build_report,
    comm_table,
    load_report,
    metrics_table,
    render_summary,
    selection_table,
    strip_timestamp,
    sweep_table,
    write_report,
    write_timing,
)
from core.settings import load_config
from core.tasks import MetricReport, TaskKind
from core.tke import SelectionPlan


def _result():
    ledger = CommLedger()
    ledger.record(0, Direction.UP, Kind.LORA, 64)
    ledger.record(0, Direction.DOWN, Kind.ADAPTER, 100)
    ledger.record(0, Direction.UP, Kind.EMBEDDING, 32, EVAL)
    reports = [
        MetricReport(TaskKind.NF, f1=0.8, support=40, extra={"baseline_f1": 0.45, "seen": 1.0}),
        MetricReport(TaskKind.TSim, sed=12.5, support=5, extra={"oracle_sed": 10.0, "seen": 1.0}),
    ]
    plan = SelectionPlan(0, 1, (3,), (0.5, 0.5), (2, 3))
    return SimpleNamespace(
        ledger=ledger, dataset=None, reports=reports, checkpoints={"llm": "ckpt/llm.bin"},
        losses={"server": [{"round": 0, "fresh": 1.0, "total": 1.25}]},
        plans={"server": [plan]},
    )


def test_report_is_deterministic_apart_from_timestamp():
    cfg = load_config()
    a = build_report(cfg, _result(), "2024-01-01T00:00:00")
    b = build_report(cfg, _result())
    assert a["generated_at"] == "2024-01-01T00:00:00"
    assert strip_timestamp(a) == strip_timestamp(b)
    assert list(a)[0] == "generated_at"
    assert a["metrics"][0] == {"task": "NF", "f1": 0.8, "sed": None, "support": 40,
                               "baseline_f1": 0.45, "seen": 1.0}
    assert a["comm"]["totals"]["train"]["up"]["lora"] == {"floats": 64, "bytes": 524, "messages": 1}
    assert a["comm"]["totals"]["eval"]["up"]["embedding"]["floats"] == 32
    assert a["selection"]["server"][0]["selected"] == [3]


def test_write_report_files(tmp_path):
    report = build_report(load_config(), _result(), "t0")
    path = write_report(tmp_path / "out", report)
    assert path.name == REPORT_NAME
    assert load_report(path) == json.loads(json.dumps(report))
    summary = (tmp_path / "out" / SUMMARY_NAME).read_text(encoding="utf-8")
    assert summary.startswith("# fed-trajprep run (t0)")
    assert "## Communication (eval)" in summary
    assert "final loss server: total=1.2500" in summary

    timing = write_timing(tmp_path / "out", {"server": [0.1234567891]})
    assert timing.name == TIMING_NAME
    assert json.loads(timing.read_text(encoding="utf-8")) == {"server": [0.123457]}


def test_metrics_table_layout():
    text = metrics_table([r.to_dict() for r in _result().reports])
    header, rule, nf, tsim = text.splitlines()
    assert header.split() == ["task", "f1", "sed_m", "n", "baseline_f1", "oracle_sed_m", "split"]
    assert set(rule.replace(" ", "")) == {"-"}
    assert nf.split() == ["NF", "0.8000", "-", "40", "0.4500", "-", "seen"]
    assert tsim.split() == ["TSim", "-", "12.5000", "5", "-", "10.0000", "seen"]


def test_unseen_tasks_are_labelled():
    text = metrics_table([{"task": "TSeg", "f1": 0.3, "support": 2, "seen": 0.0}])
    assert text.splitlines()[-1].split()[-1] == "unseen"


def test_comm_table_skips_silent_kinds():
    ledger = CommLedger()
    ledger.record(0, Direction.UP, Kind.TPA, 4)
    rows = comm_table(ledger.totals_dict()).splitlines()[2:]
    assert len(rows) == 1
    assert rows[0].split() == ["up", "tpa", "1", "4", "44"]


def test_selection_table_marks_chosen_layers():
    plan = SelectionPlan(4, 1, (3,), (0.25, 0.75), (2, 3)).to_dict()
    text = selection_table([plan])
    assert text.splitlines()[0] == "round 4, N_m=1"
    assert text.splitlines()[-1].split() == ["3", "0.7500", "yes"]
    assert selection_table([]) == "(no selection plans)"


def test_render_summary_of_minimal_report():
    text = render_summary({"metrics": [], "comm": {"totals": {}}})
    assert "## Metrics" in text and "## Communication (eval)" not in text


def test_sweep_table():
    rows = [
        {"m": 0.25, "lora_bytes_per_round": 1036.0, "metrics": {"NF": 0.7}},
        {"m": 1.0, "lora_bytes_per_round": 4108.0, "metrics": {"NF": 0.72, "SPD": 0.6}},
    ]
    lines = sweep_table(rows).splitlines()
    assert lines[0].split() == ["m", "lora_up_bytes/round", "NF", "SPD"]
    assert lines[2].split() == ["0.2500", "1036.0000", "0.7000", "-"]
    assert sweep_table([]) == "(empty sweep)"
