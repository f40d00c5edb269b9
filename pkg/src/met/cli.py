"""Command-line entry point: ``met <subcommand> [flags]``.

Every subcommand prints one JSON document on stdout and returns 0 on
success. Usage errors exit with 2, infeasible budgets with 3, bad
configs or input files with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .checkpoint import load_backbone, load_model, save_backbone
from .data import generate_synthetic, load_dataset, write_dataset
from .inference import (InfeasibleBudget, anytime_predict, baseline_macs, budgeted_route,
                        calibrate_thresholds, collect_profile, flops_table, model_costs)
from .multi_exit import MERGE_MODES, ExitPlan, count_adapter_params, leading_order_reduction, \
    naive_param_count
from .train import TrainConfig, train
from .vit import ViTConfig, init_backbone

EXIT_INFEASIBLE = 3

DEFAULT_SYNTH = {"classes": 4, "per_class": 50, "val_per_class": 25, "test_per_class": 50,
                 "image_size": 32, "noise": 0.3}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _vit(cfg: dict) -> ViTConfig:
    return ViTConfig.from_dict(cfg["vit"]) if "vit" in cfg else ViTConfig()


def _exits(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _train_config(cfg: dict, args) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.alpha is not None:
        tc["alpha"] = args.alpha
    if args.dprime is not None:
        tc["dprime"] = args.dprime
    if args.exits is not None:
        tc["exits"] = _exits(args.exits)
    if args.merge_mode is not None:
        tc["merge_mode"] = args.merge_mode
    if args.share_token:
        tc["share_token"] = True
    return TrainConfig(**tc)


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _run_dir(args) -> str:
    if not args.out:
        raise SystemExit("--out DIR (the tuning run directory) is required")
    return args.out


def _split(cfg: dict, name: str):
    return load_dataset(os.path.join(cfg["data"], name))


def cmd_init_backbone(args, cfg):
    vit = _vit(cfg)
    seed = 0 if args.seed is None else args.seed
    os.makedirs(_run_dir(args), exist_ok=True)
    stem = os.path.join(args.out, "backbone")
    save_backbone(init_backbone(vit, seed), vit, stem)
    _emit({"backbone": stem, "seed": seed, "vit": vit.to_dict()})


def cmd_synth_data(args, cfg):
    s = dict(DEFAULT_SYNTH, **cfg.get("synth", {}))
    seed = 0 if args.seed is None else args.seed
    out = _run_dir(args)
    sizes = {"train": s["per_class"], "val": s["val_per_class"], "test": s["test_per_class"]}
    for split_id, (name, per_class) in enumerate(sizes.items()):
        ds = generate_synthetic(seed, s["classes"], per_class, s["image_size"], s["noise"],
                                split=split_id)
        write_dataset(ds, os.path.join(out, name))
    _emit({"data": out, "seed": seed, "splits": sizes, "classes": s["classes"]})


def cmd_tune(args, cfg):
    tc = _train_config(cfg, args)
    backbone, vit = load_backbone(cfg["backbone"])
    tr, val = _split(cfg, "train"), _split(cfg, "val")
    res = train(tc, tr, backbone, vit, val=val, out_dir=_run_dir(args))
    last = [r for r in res.history if r.epoch == tc.epochs]
    _emit({"run": args.out, "best_epoch": res.best_epoch, "steps": res.steps,
           "final": [r.__dict__ for r in last]})


def cmd_eval_anytime(args, cfg):
    if args.exit is None:
        raise SystemExit("--exit is required")
    model, _ = load_model(os.path.join(_run_dir(args), "final"))
    test = _split(cfg, "test")
    pred, cost = anytime_predict(model, test.images, args.exit)
    _emit({"exit": args.exit, "accuracy": float((pred == test.labels).mean()),
           "cost_mmacs": cost, "samples": len(test)})


def _profiles(cfg, model):
    val, test = _split(cfg, "val"), _split(cfg, "test")
    return collect_profile(model, val.images, val.labels), \
        collect_profile(model, test.images, test.labels)


def cmd_calibrate(args, cfg):
    if args.budget is None:
        raise SystemExit("--budget is required")
    model, _ = load_model(os.path.join(_run_dir(args), "final"))
    costs = model_costs(model)
    val = _split(cfg, "val")
    th = calibrate_thresholds(collect_profile(model, val.images, val.labels), costs, args.budget)
    with open(os.path.join(args.out, "thresholds.json"), "w") as f:
        json.dump(dict(th.to_dict(), budget_mmacs=args.budget), f, indent=2)
    _emit(dict(th.to_dict(), budget_mmacs=args.budget, costs_mmacs=costs.mega))


def cmd_eval_budgeted(args, cfg):
    if args.budget is None:
        raise SystemExit("--budget is required")
    model, _ = load_model(os.path.join(_run_dir(args), "final"))
    costs = model_costs(model)
    val_prof, test_prof = _profiles(cfg, model)
    th = calibrate_thresholds(val_prof, costs, args.budget)
    res = budgeted_route(test_prof.confidences, th, costs, test_prof.predictions,
                         test_prof.labels)
    _emit(dict(res.to_dict(), thresholds=th.to_dict()["thresholds"], budget_mmacs=args.budget,
               costs_mmacs=costs.mega))


def cmd_export_profile(args, cfg):
    model, _ = load_model(os.path.join(_run_dir(args), "final"))
    val = _split(cfg, "val")
    prof = collect_profile(model, val.images, val.labels)
    path = os.path.join(args.out, "profile.csv")
    prof.to_csv(path)
    _emit({"profile": path, "samples": int(prof.confidences.shape[0]),
           "exits": int(prof.confidences.shape[1])})


def _plan(vit: ViTConfig, args, cfg, default_exits: int | None) -> ExitPlan:
    exits = _exits(args.exits)
    if exits is None:
        exits = cfg.get("train", {}).get("exits")
    if exits is None:
        if default_exits is None:
            return ExitPlan((vit.layers,), vit.layers)
        return ExitPlan.default(vit.layers, min(default_exits, vit.layers))
    return ExitPlan(tuple(exits), vit.layers)


def cmd_count_params(args, cfg):
    vit = _vit(cfg)
    dprime = args.dprime or cfg.get("train", {}).get("dprime", 30)
    plan = _plan(vit, args, cfg, 7)
    pc = count_adapter_params(vit.dim, dprime, vit.layers, plan, shared_token=args.share_token)
    naive = naive_param_count(vit.dim, dprime, vit.layers)
    _emit({"dim": vit.dim, "layers": vit.layers, "dprime": dprime,
           "placement": list(plan.placement), **pc._asdict(), "naive": naive,
           "leading_order_reduction": leading_order_reduction(vit.dim, dprime, vit.layers)})


def cmd_flops(args, cfg):
    vit = _vit(cfg)
    dprime = args.dprime
    plan = _plan(vit, args, cfg, None if dprime is None else 7)
    table = flops_table(vit, plan, dprime, share_token=args.share_token)
    _emit({"placement": list(plan.placement), "dprime": dprime,
           "gflops_per_exit": table.giga, "breakdown": table.breakdown,
           "total_gflops": table.giga[-1], "baseline_gflops": baseline_macs(vit) / 1e9})


COMMANDS = {
    "init-backbone": cmd_init_backbone,
    "synth-data": cmd_synth_data,
    "tune": cmd_tune,
    "eval-anytime": cmd_eval_anytime,
    "eval-budgeted": cmd_eval_budgeted,
    "calibrate": cmd_calibrate,
    "count-params": cmd_count_params,
    "flops": cmd_flops,
    "export-profile": cmd_export_profile,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="met", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--exit", type=int)
        p.add_argument("--budget", type=float, help="average budget in mega-MACs")
        p.add_argument("--alpha", type=float)
        p.add_argument("--dprime", type=int)
        p.add_argument("--exits", metavar="LIST", help="comma-separated layer index per exit")
        p.add_argument("--merge-mode", choices=MERGE_MODES)
        p.add_argument("--share-token", action="store_true")
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, _load_config(args.config))
    except InfeasibleBudget as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        if isinstance(e.code, str):
            parser.print_usage(sys.stderr)
            print(f"error: {e.code}", file=sys.stderr)
            return 2
        return int(e.code or 0)
    return 0


def main() -> None:
    sys.exit(run_cli())
