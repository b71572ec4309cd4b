"""Command line entry point: ``blockssm <verb> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import systems
from ..ssm import load_checkpoint
from ..systems import Normalizer
from .config import ExperimentConfig
from .experiments import AblationPlan, export_eigenvalues, grid_search, run_ablation
from .training import nstep_mse, open_loop_eval, train, write_trace_csv


def _simulate(args):
    if args.system == "cstr":
        ds = systems.make_cstr_dataset(seed=args.seed, T=args.T, dt=args.dt or 0.1)
    elif args.system == "twotank":
        ds = systems.make_twotank_dataset(seed=args.seed, T=args.T, dt=args.dt or 1.0)
    else:
        ds, _ = systems.make_linear_dataset(seed=args.seed, T=args.T)
    systems.save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.nu} inputs, {ds.ny} outputs) to {args.out}")


def _load_data(path):
    return systems.load_dataset(path) if path else None


def _train(args):
    cfg = ExperimentConfig.load(args.config)
    if args.max_steps is not None:
        cfg = cfg.replace(max_steps=args.max_steps)
    r = train(cfg, _load_data(args.data), out_dir=args.out_dir)
    print(json.dumps(r.summary()["metrics"], indent=2))


def _eval(args):
    model = load_checkpoint(args.checkpoint)
    manifest = json.loads(Path(args.checkpoint).with_suffix(".json").read_text())
    extra = manifest.get("extra", {})
    ds = systems.load_dataset(args.data)
    exp = ExperimentConfig.from_dict(extra["experiment"]) if "experiment" in extra else None
    U, Y = ds.U, ds.Y
    if extra.get("normalizer"):
        U, Y = Normalizer.from_dict(extra["normalizer"]).apply(U, Y)
    scaled = systems.TrajectoryDataset(U, Y, ds.dt, ds.name)
    parts = systems.split_dataset(scaled, normalize=False)
    split = {"train": parts[0], "dev": parts[1], "test": parts[2], "all": scaled}[args.split]
    ol = open_loop_eval(model, split)
    out = {"split": args.split, "open_loop": ol.mse, "open_loop_per_output": ol.per_output.tolist()}
    if exp is not None:
        w = systems.make_windows(split, exp.horizon, model.n_p)
        out["nstep"] = nstep_mse(model, w)
    if args.trace:
        write_trace_csv(args.trace, ol)
    print(json.dumps(out, indent=2))


def _ablate(args):
    plan = AblationPlan.load(args.plan)
    res = run_ablation(plan, _load_data(args.data))
    table = res.table()
    text = json.dumps({"plan": plan.to_dict(), "cells": table}, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text)
    for row in table:
        print(f"{row['cell']:>10}  median={row['median']:.5g}  IQR=[{row['q1']:.3g}, {row['q3']:.3g}]")


def _grid(args):
    template = ExperimentConfig.load(args.template)
    grid = json.loads(Path(args.grid).read_text())
    ranked = grid_search(template, grid, _load_data(args.data), out_path=args.out)
    for i, r in enumerate(ranked):
        print(f"{i:2d}  {r.config.name}  dev_open_loop={r.metrics['dev_open_loop']:.5g}")


def _eigen(args):
    model = load_checkpoint(args.checkpoint)
    spectra = export_eigenvalues(model, args.out)
    for name, eigs in spectra.items():
        print(f"{name}: max |lambda| = {np.abs(eigs).max():.6g}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockssm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="generate an emulator dataset")
    s.add_argument("--system", choices=["cstr", "twotank", "linear"], required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--T", type=int, default=10_000)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_simulate)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset file; generated from the config when omitted")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--max-steps", type=int)
    s.set_defaults(func=_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["train", "dev", "test", "all"], default="test")
    s.add_argument("--trace", help="write an open-loop trace CSV here")
    s.set_defaults(func=_eval)

    s = sub.add_parser("ablate", help="run an ablation plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=_ablate)

    s = sub.add_parser("grid", help="hyperparameter grid search")
    s.add_argument("--template", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--data")
    s.add_argument("--out", default="leaderboard.json")
    s.set_defaults(func=_grid)

    s = sub.add_parser("eigen", help="export state-transition spectra")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_eigen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
