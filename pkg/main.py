# fed-trajprep - command line driver
# Licensed under GPL v3

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from core.errors import ConfigError, TrajPrepError
from core.run_logger import configure_logging, get_logger, log_run_launch
from core.settings import RunConfig, load_config

logger = get_logger("CLI")

TRAJ_CSV = "trajectories.csv"
CLEAN_CSV = "clean.csv"
ROAD_CSV = "roads.csv"
DEMO_SEED = 42


class _Parser(argparse.ArgumentParser):
    """参数错误按配置错误处理（退出码 1）"""

    def error(self, message):
        raise ConfigError(message)


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _emit(args, payload: dict, text: str) -> None:
    """--json 时输出机器可读结果，否则输出文本摘要"""
    if args.json:
        print(json.dumps(payload, indent=2, ensure_ascii=False))
    else:
        print(text)


def _config(args) -> RunConfig:
    return load_config(args.config, seed=args.seed, out_dir=getattr(args, "out", None))


def _dataset(cfg: RunConfig, data_dir: Optional[str]):
    from core.task_data import build_dataset, generate_dataset
    from core.tasks import load_road_network
    from core.trajectory import load_csv

    if not data_dir:
        return generate_dataset(cfg)
    root = Path(data_dir)
    if not (root / TRAJ_CSV).exists():
        raise ConfigError(f"no {TRAJ_CSV} under {root}")
    observed = load_csv(root / TRAJ_CSV)
    clean = load_csv(root / CLEAN_CSV) if (root / CLEAN_CSV).exists() else None
    road = load_road_network(root / ROAD_CSV) if (root / ROAD_CSV).exists() else None
    return build_dataset(cfg, observed, clean, road)


# ========== 命令 ==========
def cmd_gen_data(args) -> int:
    from core.task_data import synthesize
    from core.tasks import save_road_network, synth_road_network
    from core.trajectory import save_csv

    cfg = _config(args)
    out = Path(cfg.output.out_dir)
    log_run_launch(out, "gen-data", args.config, cfg.seed)
    observed, clean, truths = synthesize(cfg)
    save_csv(observed, out / TRAJ_CSV)
    save_csv(clean, out / CLEAN_CSV)
    save_road_network(synth_road_network(cfg.dataset.bbox, *cfg.dataset.road_grid), out / ROAD_CSV)
    n_noise = sum(sum(gt.noise_flags) for gts in truths.values() for gt in gts)
    payload = {"out": str(out), "trajectories": len(observed),
               "points": sum(len(t) for t in observed), "noise_points": n_noise}
    _emit(args, payload, f"wrote {len(observed)} trajectories ({payload['points']} points, "
                         f"{n_noise} noisy) to {out}")
    return 0


def _train(cfg: RunConfig, data_dir: Optional[str] = None):
    from core.fpo import run_training

    return run_training(cfg, _dataset(cfg, data_dir), cfg.output.out_dir)


def cmd_train(args) -> int:
    from core.report import build_report, render_summary, write_report, write_timing

    cfg = _config(args)
    out = Path(cfg.output.out_dir)
    log_run_launch(out, "train", args.config, cfg.seed)
    result = _train(cfg, args.data)
    report = build_report(cfg, result)
    write_report(out, report)
    write_timing(out, result.timings)
    _emit(args, report, render_summary(report))
    return 0


def cmd_eval(args) -> int:
    from core.checkpoint import load_into_model, load_tpa
    from core.fpo import TrainedState, evaluate
    from core.report import metrics_table
    from core.settings import _tasks
    from core.surrogate import build_llm, build_slm
    from core.task_data import client_input_dim, server_input_dim

    cfg = _config(args)
    ckpt = Path(args.checkpoint)
    if not (ckpt / "llm.bin").exists():
        raise ConfigError(f"no llm.bin under {ckpt}")
    log_run_launch(Path(cfg.output.out_dir), "eval", args.config, cfg.seed)
    dataset = _dataset(cfg, args.data)
    llm_cfg, slm_cfg = cfg.model_configs(dataset.vocab.size, server_input_dim(), client_input_dim())
    llm = load_into_model(build_llm(llm_cfg, 0), ckpt / "llm.bin")
    slms, tpas = {}, {}
    for cid in range(cfg.clients):
        slms[cid] = load_into_model(build_slm(llm.copy(), slm_cfg, 0), ckpt / f"slm-{cid}.bin")
        tpas[cid] = load_tpa(ckpt / f"tpa-{cid}.bin", dataset.norm)
    tasks = _tasks(args.tasks.split(","), "--tasks") if args.tasks else cfg.tasks.all
    reports = evaluate(TrainedState(llm, slms, tpas), dataset, cfg, tasks=tasks)
    metrics = [r.to_dict() for r in reports]
    _emit(args, {"metrics": metrics}, metrics_table(metrics))
    return 0


def cmd_agg_demo(args) -> int:
    from services.secure_aggregator import run_threaded_aggregation

    seed = DEMO_SEED if args.seed is None else args.seed
    if args.clients < 1 or args.length < 1:
        raise ConfigError("--clients and --len must be ≥ 1")
    rng = np.random.default_rng(seed)
    per_client = [rng.normal(0.0, 1.0, args.length) for _ in range(args.clients)]
    results = run_threaded_aggregation(per_client, session_seed=seed)
    plain = np.mean(per_client, axis=0)
    err = max(float(np.max(np.abs(r - plain))) for r in results)
    agree = all(np.array_equal(results[0], r) for r in results[1:])
    passed = err <= 1e-9 and agree
    payload = {"clients": args.clients, "length": args.length, "seed": seed,
               "max_abs_error": err, "clients_agree": agree, "pass": passed}
    _emit(args, payload, f"clients={args.clients} len={args.length} seed={seed}\n"
                         f"max |masked-mean - plain-mean| = {err:.3e}\n"
                         f"{'PASS' if passed else 'FAIL'}")
    return 0 if passed else 2


def cmd_select_demo(args) -> int:
    from core.report import _table
    from core.tke import selection_probabilities, simulate_selection

    seed = DEMO_SEED if args.seed is None else args.seed
    if args.ratios:
        r = np.asarray(_floats(args.ratios))
        if args.n is not None and args.n != r.size:
            raise ConfigError(f"--n {args.n} does not match {r.size} ratios")
        if np.any(r < 0) or r.sum() <= 0:
            raise ConfigError("ratios must be non-negative with a positive sum")
        r = r / r.sum()
    else:
        if args.n is None:
            raise ConfigError("give --ratios or --n")
        r = np.random.default_rng(seed).dirichlet(np.ones(args.n))
    if not 0 <= args.nm <= r.size:
        raise ConfigError(f"--nm must lie in [0, {r.size}]")
    closed = selection_probabilities(r, args.nm)
    empirical = simulate_selection(r, args.nm, args.trials, seed)
    gap = float(np.max(np.abs(closed - empirical))) if r.size else 0.0
    passed = gap <= 0.005
    rows = [(i, float(r[i]), float(closed[i]), float(empirical[i]), float(abs(closed[i] - empirical[i])))
            for i in range(r.size)]
    payload = {"ratios": r.tolist(), "n_m": args.nm, "trials": args.trials,
               "closed_form": closed.tolist(), "empirical": empirical.tolist(),
               "sum": float(closed.sum()), "max_gap": gap, "pass": passed}
    _emit(args, payload, _table(["layer", "ratio", "closed_form", "empirical", "gap"], rows)
          + f"\nsum={closed.sum():.6f} max gap={gap:.4f}\n{'PASS' if passed else 'FAIL'}")
    return 0 if passed else 2


def cmd_report(args) -> int:
    from core.comm_ledger import Direction, Kind
    from core.report import REPORT_NAME, export_summary, load_report, render_summary, sweep_table

    out = Path(args.out) if args.out else None
    if args.m_sweep:
        cfg = _config(args)
        out = Path(cfg.output.out_dir)
        log_run_launch(out, "report --m-sweep", args.config, cfg.seed)
        values = _floats(args.m_sweep)
        bad = [m for m in values if not 0 < m <= 1]
        if bad:
            raise ConfigError(f"tke.m: {bad[0]} outside (0, 1]", "tke.m")
        rows = []
        for m in values:
            run_cfg = replace(cfg, tke=replace(cfg.tke, m=m),
                              output=replace(cfg.output, out_dir=str(out / f"m-{m:g}"), save_checkpoints=False))
            result = _train(run_cfg, args.data)
            lora = result.ledger.total(Direction.UP, Kind.LORA).bytes
            rows.append({"m": m, "lora_bytes_per_round": lora / max(run_cfg.rounds, 1),
                         "metrics": {r.task.value: (r.f1 if r.f1 is not None else r.sed) for r in result.reports}})
        out.mkdir(parents=True, exist_ok=True)
        (out / "m_sweep.json").write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
        _emit(args, {"m_sweep": rows}, sweep_table(rows))
        return 0
    if out is None:
        raise ConfigError("report needs --out <dir> containing report.json")
    path = out / REPORT_NAME
    if not path.exists():
        raise ConfigError(f"no {REPORT_NAME} under {out}")
    log_run_launch(out, "report", args.config, args.seed)
    report = load_report(path)
    export_summary(report, out / "summary.txt")
    _emit(args, report, render_summary(report))
    return 0


# ========== 解析 ==========
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="warnings only")

    parser = _Parser(prog="fed-trajprep", description="Federated trajectory data preparation simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic corrupted trajectories")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run federated training and write a report")
    p.add_argument("--data", help="directory with trajectories.csv (generated when omitted)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate saved checkpoints on the test split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory from a train run")
    p.add_argument("--data", help="directory with trajectories.csv (generated when omitted)")
    p.add_argument("--tasks", help="comma-separated task list (default: train + unseen)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agg-demo", parents=[common], help="verify masked aggregation against plain averaging")
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--len", dest="length", type=int, default=100)
    p.set_defaults(func=cmd_agg_demo)

    p = sub.add_parser("select-demo", parents=[common], help="closed-form vs Monte Carlo layer selection")
    p.add_argument("--n", type=int)
    p.add_argument("--nm", type=int, default=2)
    p.add_argument("--ratios", help="comma-separated layer ratios")
    p.add_argument("--trials", type=int, default=200_000)
    p.set_defaults(func=cmd_select_demo)

    p = sub.add_parser("report", parents=[common], help="re-render summary.txt or run an m sweep")
    p.add_argument("--m-sweep", help="comma-separated m values to train and tabulate")
    p.add_argument("--data", help="directory with trajectories.csv (generated when omitted)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point；返回退出码"""
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    configure_logging(verbose=args.verbose, quiet=args.quiet)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except TrajPrepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
