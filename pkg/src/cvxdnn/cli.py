"""Command-line entry point.

Exit codes: 0 success, 1 IO or plan problems, 2 usage errors, 3 numerical
failure, 4 method/network mismatch.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import bench
from .branch_bound import BBOptions
from .embeddings import EmbeddingError
from .market import (MarketInstance, build_bidding_model, detail_csv, evaluate_solution, generate_instance,
                     purchase_cost, solve_bidding, summary_csv)
from .model import write_lp_text
from .network import (Dataset, ReluNetwork, TrainConfig, TrainingDiverged, fit, init_network, make_dataset)

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISMATCH = 0, 1, 2, 3, 4

# flag defaults; a --config file may override them and explicit flags override the file
DEFAULTS = {
    "gen-data": {"n": 30_000, "seed": 0, "margin": 0.01, "out": None},
    "train": {"data": None, "arch": "10,20,10", "kind": "cvxd", "k": 1, "epochs": 1000, "lr": 1e-4,
              "batch": 1000, "seed": 0, "out": None, "report": None},
    "solve": {"instance": None, "generate": None, "seed": 0, "T": 24, "net": None, "method": None,
              "alpha": "1000", "lb": -10.0, "ub": 10.0, "k": 2, "np": 4, "time_limit": 3600.0,
              "gap": 0.01, "out_dir": ".", "export_lp": None, "save_instance": None},
    "bench": {"plan": None, "default_plan": False, "out_dir": None, "jobs": 1, "seed": None},
    "sweep": {"plan": None, "default_plan": False, "out_dir": None, "jobs": 1, "seed": None,
              "penalties": False, "method": "pcar", "include_zero": False, "widths": None,
              "depths": False, "grid": None},
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with default values for this subcommand's flags")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cvxdnn", description="Neural surrogates embedded in bidding models.")
    sub = ap.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    p = sub.add_parser("gen-data", help="sample a purchase-cost training set")
    _add_common(p)
    p.add_argument("--n", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--margin", type=float, default=S)
    p.add_argument("--out", default=S)

    p = sub.add_parser("train", help="fit a ReLU network to a dataset")
    _add_common(p)
    p.add_argument("--data", default=S)
    p.add_argument("--arch", default=S, help="hidden widths, e.g. 10,20,10")
    p.add_argument("--kind", choices=["cvxd", "uc"], default=S)
    p.add_argument("--k", type=int, default=S, help="convexification boundary for --kind cvxd")
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--report", default=S, help="train report path (default: <out>.report.json)")

    p = sub.add_parser("solve", help="build, solve and evaluate one bidding model")
    _add_common(p)
    p.add_argument("--instance", default=S)
    p.add_argument("--generate", choices=["low", "medium", "high"], default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--T", type=int, default=S)
    p.add_argument("--net", default=S)
    p.add_argument("--method", choices=list(bench.METHOD_NAMES), default=S)
    p.add_argument("--alpha", default=S, help="penalty: number or layer rule such as 5^l")
    p.add_argument("--lb", type=float, default=S)
    p.add_argument("--ub", type=float, default=S)
    p.add_argument("--k", type=int, default=S)
    p.add_argument("--np", type=int, default=S)
    p.add_argument("--time-limit", dest="time_limit", type=float, default=S)
    p.add_argument("--gap", type=float, default=S)
    p.add_argument("--out-dir", dest="out_dir", default=S)
    p.add_argument("--export-lp", dest="export_lp", default=S)
    p.add_argument("--save-instance", dest="save_instance", default=S)

    for name, helptext in (("bench", "run an experiment plan"), ("sweep", "penalty or architecture sweep")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--plan", default=S)
        p.add_argument("--default-plan", dest="default_plan", action="store_true", default=S)
        p.add_argument("--out-dir", dest="out_dir", default=S)
        p.add_argument("--jobs", type=int, default=S)
        p.add_argument("--seed", type=int, default=S)
        if name == "sweep":
            p.add_argument("--penalties", action="store_true", default=S)
            p.add_argument("--method", choices=["pcar", "pctar"], default=S)
            p.add_argument("--include-zero", dest="include_zero", action="store_true", default=S)
            p.add_argument("--grid", default=S, help="comma-separated penalties overriding the default grid")
            p.add_argument("--widths", default=S, help="total widths, e.g. 20,80,200,400")
            p.add_argument("--depths", action="store_true", default=S)
    return ap


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise CliError(EXIT_USAGE, f"config {path} must hold a JSON object")
        for key, val in file_cfg.items():
            norm = key.replace("-", "_")
            if norm not in cfg:
                raise CliError(EXIT_USAGE, f"unknown config key {key!r} for {command}")
            cfg[norm] = val
    for key, val in vars(args).items():
        if key not in ("command", "config"):
            cfg[key] = val
    return cfg


def _write(path, text):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def _read(path, what):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc}") from None


def _ints(text, what):
    try:
        vals = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise CliError(EXIT_USAGE, f"{what} must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise CliError(EXIT_USAGE, f"{what} must list positive integers")
    return vals


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(cfg, out=sys.stdout):
    if cfg["out"] is None:
        raise CliError(EXIT_USAGE, "gen-data needs --out")
    if int(cfg["n"]) < 1:
        raise CliError(EXIT_USAGE, "--n must be at least 1")
    if not 0 <= float(cfg["margin"]) < 1:
        raise CliError(EXIT_USAGE, "--margin must lie in [0, 1)")
    data = make_dataset(purchase_cost, n=int(cfg["n"]), margin=float(cfg["margin"]), seed=int(cfg["seed"]))
    _write(cfg["out"], data.to_csv())
    print(f"wrote {data.n} rows to {cfg['out']} (seed {cfg['seed']})", file=out)


def cmd_train(cfg, out=sys.stdout):
    if cfg["data"] is None or cfg["out"] is None:
        raise CliError(EXIT_USAGE, "train needs --data and --out")
    arch = _ints(cfg["arch"], "--arch")
    if int(cfg["epochs"]) < 1 or int(cfg["batch"]) < 1 or float(cfg["lr"]) <= 0:
        raise CliError(EXIT_USAGE, "--epochs, --batch and --lr must be positive")
    convex_from = None
    if cfg["kind"] == "cvxd":
        convex_from = int(cfg["k"])
        if not 1 <= convex_from <= len(arch) + 1:
            raise CliError(EXIT_USAGE, f"--k must lie in 1..{len(arch) + 1}")
    elif cfg["kind"] != "uc":
        raise CliError(EXIT_USAGE, "--kind must be cvxd or uc")
    text = _read(cfg["data"], "dataset")
    try:
        data = Dataset.from_csv(text)
    except ValueError as exc:
        raise CliError(EXIT_IO, f"cannot parse dataset {cfg['data']}: {exc}") from None
    net = init_network([4, *arch, 1], convex_from, seed=int(cfg["seed"]))
    tc = TrainConfig(learning_rate=float(cfg["lr"]), epochs=int(cfg["epochs"]),
                     batch_size=int(cfg["batch"]), seed=int(cfg["seed"]))
    try:
        report = fit(net, data, tc, log=lambda msg: print(msg, file=out))
    except TrainingDiverged as exc:
        raise CliError(EXIT_NUMERIC, f"training diverged: {exc}") from None
    except ValueError as exc:
        raise CliError(EXIT_NUMERIC, f"training failed: {exc}") from None
    blob = net.to_dict()
    blob["meta"] = {"seed": int(cfg["seed"]), "epochs": tc.epochs, "lr": tc.learning_rate,
                    "batch": tc.batch_size, "data": str(cfg["data"])}
    _write(cfg["out"], json.dumps(blob, indent=1))
    rep = report.to_dict()
    rep["seed"] = int(cfg["seed"])
    _write(cfg["report"] or f"{cfg['out']}.report.json", json.dumps(rep, indent=1) + "\n")
    print(f"train RMSE {report.train_rmse_raw:.6g}, validation RMSE {report.val_rmse_raw:.6g} "
          f"(raw units); wrote {cfg['out']}", file=out)


def cmd_solve(cfg, out=sys.stdout):
    if cfg["method"] is None:
        raise CliError(EXIT_USAGE, "solve needs --method")
    if (cfg["instance"] is None) == (cfg["generate"] is None):
        raise CliError(EXIT_USAGE, "solve needs exactly one of --instance or --generate")
    if float(cfg["time_limit"]) <= 0 or not 0 <= float(cfg["gap"]) < 1:
        raise CliError(EXIT_USAGE, "--time-limit must be positive and --gap in [0, 1)")
    if cfg["instance"] is not None:
        try:
            inst = MarketInstance.loads(_read(cfg["instance"], "instance"))
        except (ValueError, KeyError) as exc:
            raise CliError(EXIT_IO, f"invalid instance file {cfg['instance']}: {exc}") from None
    else:
        if int(cfg["T"]) < 1:
            raise CliError(EXIT_USAGE, "--T must be at least 1")
        inst = generate_instance(cfg["generate"], int(cfg["T"]), int(cfg["seed"]))
    if cfg["save_instance"]:
        _write(cfg["save_instance"], inst.dumps())
    try:
        method = bench.make_method(cfg["method"], cfg["alpha"], cfg["lb"], cfg["ub"], cfg["k"], cfg["np"])
    except (bench.PlanError, EmbeddingError, ValueError) as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    net = None
    if cfg["method"] != "pwl":
        if cfg["net"] is None:
            raise CliError(EXIT_USAGE, f"method {cfg['method']} needs --net")
        try:
            net = ReluNetwork.loads(_read(cfg["net"], "network"))
        except (ValueError, KeyError) as exc:
            raise CliError(EXIT_IO, f"invalid network file {cfg['net']}: {exc}") from None
    try:
        bm = build_bidding_model(inst, method, net)
    except EmbeddingError as exc:
        raise CliError(EXIT_MISMATCH, f"method {cfg['method']} cannot use this network: {exc}") from None
    if cfg["export_lp"]:
        _write(cfg["export_lp"], write_lp_text(bm.model))
    res = solve_bidding(bm, BBOptions(time_limit=float(cfg["time_limit"]), gap=float(cfg["gap"])))
    if not res.has_solution:
        print(f"status {res.status.value}: no solution", file=out)
        raise CliError(EXIT_NUMERIC, f"solver finished with status {res.status.value} and no solution")
    label = bench.describe(method)
    rep = evaluate_solution(inst, res, label, net)
    scenario = f"{inst.category}-{inst.seed}" if cfg["instance"] is None else Path(cfg["instance"]).stem
    out_dir = Path(cfg["out_dir"])
    _write(out_dir / "summary.csv", summary_csv([(rep, scenario)]))
    _write(out_dir / "detail.csv", detail_csv([(rep, scenario)]))
    meta = {"seed": int(cfg["seed"]), "method": label, "scenario": scenario, "status": res.status.value,
            "objective": res.objective, "best_bound": res.best_bound,
            "gap": res.gap if math.isfinite(res.gap) else None, "profit": rep.profit, "rmse": rep.rmse,
            "looseness": None if math.isnan(rep.looseness) else rep.looseness, "warnings": rep.warnings,
            "nodes": res.bb_nodes, "simplex_iterations": res.simplex_iterations}
    _write(out_dir / "run.json", json.dumps(meta, indent=1) + "\n")
    for w in rep.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(summary_csv([(rep, scenario)]), end="", file=out)


def _plan(cfg) -> bench.ExperimentPlan:
    if cfg["plan"] and cfg["default_plan"]:
        raise CliError(EXIT_USAGE, "use either --plan or --default-plan")
    if cfg["plan"]:
        try:
            plan = bench.ExperimentPlan.load(cfg["plan"])
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read plan {cfg['plan']}: {exc}") from None
        except (bench.PlanError, TypeError, ValueError) as exc:
            raise CliError(EXIT_IO, f"invalid plan {cfg['plan']}: {exc}") from None
    elif cfg["default_plan"]:
        plan = bench.default_plan(seed=0 if cfg["seed"] is None else int(cfg["seed"]))
    else:
        raise CliError(EXIT_USAGE, "need --plan or --default-plan")
    if cfg["seed"] is not None:
        plan.seed = int(cfg["seed"])
        plan.scenarios.seed = int(cfg["seed"])
    if cfg["out_dir"]:
        plan.out_dir = str(cfg["out_dir"])
    if int(cfg["jobs"]) < 1:
        raise CliError(EXIT_USAGE, "--jobs must be at least 1")
    plan.jobs = int(cfg["jobs"])
    return plan


def _log(out):
    return lambda msg: print(msg, file=out)


def cmd_bench(cfg, out=sys.stdout):
    plan = _plan(cfg)
    res = bench.run_benchmark(plan, log=_log(out))
    print(bench.format_table(res.summary), file=out)
    print(f"outputs in {plan.out_dir}", file=out)


def cmd_sweep(cfg, out=sys.stdout):
    modes = [bool(cfg["penalties"]), cfg["widths"] is not None, bool(cfg["depths"])]
    if sum(modes) != 1:
        raise CliError(EXIT_USAGE, "choose exactly one of --penalties, --widths or --depths")
    if cfg["plan"] is None and not cfg["default_plan"]:
        cfg = dict(cfg, default_plan=True)
    plan = _plan(cfg)
    if cfg["penalties"]:
        grid = None
        if cfg["grid"]:
            try:
                grid = [bench._parse_alpha(a.strip()) for a in str(cfg["grid"]).split(",") if a.strip()]
            except bench.PlanError as exc:
                raise CliError(EXIT_USAGE, str(exc)) from None
        res = bench.penalty_sweep(plan, (cfg["method"],), grid, bool(cfg["include_zero"]), log=_log(out))
    else:
        if cfg["widths"] is not None:
            try:
                archs = bench.width_architectures(_ints(cfg["widths"], "--widths"))
            except bench.PlanError as exc:
                raise CliError(EXIT_USAGE, str(exc)) from None
        else:
            archs = list(bench.DEPTH_ARCHITECTURES)
        res = bench.architecture_sweep(plan, archs, log=_log(out))
    print(bench.format_table(res.summary), file=out)
    print(f"outputs in {plan.out_dir}", file=out)


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "solve": cmd_solve, "bench": cmd_bench,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args.command, args)
        COMMANDS[args.command](cfg, sys.stdout)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.code == EXIT_USAGE:
            print(f"usage: cvxdnn {args.command} --help for the full flag list", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
