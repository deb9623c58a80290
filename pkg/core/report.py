"""报告导出模块 - report.json（唯一时间戳在 generated_at）、summary.txt 文本表格、timing.json"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from core.comm_ledger import EVAL, TRAIN, CommLedger
from core.settings import RunConfig, config_to_dict
from core.run_logger import get_logger

logger = get_logger("REPORT")

REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.txt"
TIMING_NAME = "timing.json"


def build_report(cfg: RunConfig, result, generated_at: Optional[str] = None) -> Dict[str, Any]:
    """除 generated_at 外全部由配置决定"""
    ledger: CommLedger = result.ledger
    dataset = result.dataset
    report: Dict[str, Any] = {"generated_at": generated_at or datetime.now().isoformat(timespec="seconds")}
    report["config"] = config_to_dict(cfg)
    if dataset is not None:
        report["dataset"] = {
            "train_trajectories": len(dataset.train),
            "test_trajectories": len(dataset.test),
            "users": len(dataset.ctx.user_index),
            "vocab_size": dataset.vocab.size,
            "road_segments": len(dataset.road),
        }
    report["metrics"] = [r.to_dict() for r in result.reports]
    report["losses"] = {name: list(rows) for name, rows in sorted(result.losses.items())}
    report["selection"] = {name: [p.to_dict() for p in plans] for name, plans in sorted(result.plans.items())}
    report["comm"] = {
        "totals": {TRAIN: ledger.totals_dict(TRAIN), EVAL: ledger.totals_dict(EVAL)},
        "rounds": ledger.to_dict(),
    }
    report["checkpoints"] = dict(sorted(result.checkpoints.items()))
    return report


def write_report(out_dir: Union[str, Path], report: Dict[str, Any]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / REPORT_NAME
    path.write_text(json.dumps(report, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    export_summary(report, out / SUMMARY_NAME)
    logger.info(f"report written to {path}")
    return path


def write_timing(out_dir: Union[str, Path], timings: Dict[str, List[float]]) -> Path:
    """各 actor 每轮耗时单独存放，不影响报告的可复现性"""
    path = Path(out_dir) / TIMING_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: [round(t, 6) for t in times] for name, times in sorted(timings.items())}
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def load_report(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def strip_timestamp(report: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in report.items() if k != "generated_at"}


# ========== 文本表格 ==========
def _table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cells[0], widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths)))
              for r in cells[1:]]
    return "\n".join(lines)


def _fmt(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def metrics_table(metrics: Sequence[Dict[str, Any]]) -> str:
    rows = [(m["task"], m.get("f1"), m.get("sed"), m.get("support"), m.get("baseline_f1"),
             m.get("oracle_sed"), "seen" if m.get("seen", 1.0) else "unseen") for m in metrics]
    return _table(["task", "f1", "sed_m", "n", "baseline_f1", "oracle_sed_m", "split"], rows)


def comm_table(totals: Dict[str, Dict[str, Dict[str, int]]]) -> str:
    rows = []
    for direction in sorted(totals):
        for kind in sorted(totals[direction]):
            e = totals[direction][kind]
            if e["messages"]:
                rows.append((direction, kind, e["messages"], e["floats"], e["bytes"]))
    return _table(["direction", "kind", "messages", "floats", "bytes"], rows)


def selection_table(plans: Sequence[Dict[str, Any]]) -> str:
    """最后一轮的逐层选中概率"""
    if not plans:
        return "(no selection plans)"
    last = plans[-1]
    rows = [(layer, p, "yes" if layer in last["selected"] else "")
            for layer, p in zip(last["layer_ids"], last["probabilities"])]
    return f"round {last['round']}, N_m={last['n_m']}\n" + _table(["layer", "Pr(selected)", "chosen"], rows)


def render_summary(report: Dict[str, Any]) -> str:
    cfg = report.get("config", {})
    parts = [
        f"# fed-trajprep run ({report.get('generated_at', '')})",
        f"clients={cfg.get('clients')} rounds={cfg.get('rounds')} m={cfg.get('m')} "
        f"period={cfg.get('freeze_period')} aggregation={cfg.get('aggregation')} seed={cfg.get('seed')}",
        "",
        "## Metrics",
        metrics_table(report.get("metrics", [])),
        "",
        "## Communication (train)",
        comm_table(report.get("comm", {}).get("totals", {}).get(TRAIN, {})),
    ]
    eval_totals = report.get("comm", {}).get("totals", {}).get(EVAL, {})
    if any(e["messages"] for kinds in eval_totals.values() for e in kinds.values()):
        parts += ["", "## Communication (eval)", comm_table(eval_totals)]
    for name, plans in report.get("selection", {}).items():
        parts += ["", f"## Layer selection: {name}", selection_table(plans)]
    for name, rows in report.get("losses", {}).items():
        if rows:
            last = rows[-1]
            values = "  ".join(f"{k}={v:.4f}" for k, v in last.items() if k not in ("round", "fresh"))
            parts.append(f"final loss {name}: {values}")
    return "\n".join(parts) + "\n"


def export_summary(report: Dict[str, Any], path: Union[str, Path]) -> bool:
    Path(path).write_text(render_summary(report), encoding="utf-8")
    return True


def sweep_table(rows: Sequence[Dict[str, Any]]) -> str:
    """m 敏感性扫描：每轮平均上传 LoRA 字节与各任务指标"""
    if not rows:
        return "(empty sweep)"
    tasks = sorted({t for r in rows for t in r["metrics"]})
    headers = ["m", "lora_up_bytes/round"] + tasks
    body = [[r["m"], r["lora_bytes_per_round"]] + [r["metrics"].get(t) for t in tasks] for r in rows]
    return _table(headers, body)
