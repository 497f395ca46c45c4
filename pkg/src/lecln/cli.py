"""Command-line entry point: ``lecln gen | train | eval | report``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config
from .dataset import load_split, read_manifest, write_dataset
from .eval import ModelBank, attach_weights, read_results_csv, run_experiment, write_outputs
from .model import VARIANTS, TrainingDiverged
from .tensorio import ConfigHashMismatch
from .training import load_stage_a, load_stage_b, run_stage_a, run_stage_b, stage_a_dir, stage_b_dir

log = logging.getLogger("lecln")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _check_dataset(cfg: RunConfig, data: Path) -> dict:
    manifest = read_manifest(data)
    if manifest["config_hash"] != cfg.hash():
        raise ConfigHashMismatch(f"dataset {data} was generated with config {manifest['config_hash'][:12]}, "
                                 f"current config is {cfg.hash()[:12]}")
    return manifest


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    write_dataset(cfg, out)
    print(f"dataset written to {out} (config {cfg.hash()[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Path(args.data)
    manifest = _check_dataset(cfg, data)
    budgets = tuple(manifest["budgets"])
    out = Path(args.out)
    if args.stage == "a":
        if args.budget not in budgets:
            raise ConfigError(f"budget {args.budget} not in dataset budgets {budgets}")
        train = load_split(data, "train", (args.budget,))
        val = load_split(data, "val", (args.budget,))
        variants = VARIANTS if args.variant == "all" else (args.variant,)
        for v in variants:
            d = stage_a_dir(out, args.budget, v)
            _, res = run_stage_a(cfg, train, val, args.budget, v, directory=d, resume=not args.fresh)
            print(f"stage a budget {args.budget} {v}: final train loss {res.history[-1]['train_loss']:.6g} -> {d}")
    else:
        train = load_split(data, "train", ())
        val = load_split(data, "val", ())
        d = stage_b_dir(out)
        _, res = run_stage_b(cfg, train, val, directory=d, resume=not args.fresh)
        print(f"stage b: final train loss {res.history[-1]['train_loss']:.6g} -> {d}")
    return EXIT_OK


def load_models(cfg: RunConfig, root: Path, budgets) -> ModelBank:
    bank = ModelBank()
    if (stage_b_dir(root) / "manifest.json").is_file():
        bank.stage_b = load_stage_b(stage_b_dir(root), cfg)
    for b in budgets:
        for v in VARIANTS:
            d = stage_a_dir(root, b, v)
            if (d / "manifest.json").is_file():
                bank.stage_a[(b, v)] = load_stage_a(d, cfg)
    return bank


def cmd_eval(args) -> int:
    cfg = _config(args)
    grid = cfg.eval
    if args.realizations is not None:
        grid = dataclasses.replace(grid, realizations=args.realizations)
    bank = load_models(cfg, Path(args.models), grid.measurement_budgets)
    rows = run_experiment(grid, cfg, bank, out_path=Path(args.out), timing=args.timing)
    print(f"{len(rows)} result rows written to {Path(args.out) / 'results.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    rows = read_results_csv(out / "results.csv")
    attach_weights(rows, out / "weights.csv")
    old = json.loads((out / "summary.json").read_text()) if (out / "summary.json").is_file() else {}
    summary = write_outputs(rows, out, config_hash=old.get("config_hash", ""))
    print(f"{'snr_db':>7} {'budget':>6} {'scheme':>11} {'nmse_db':>9} {'se':>8} {'se_norm':>8}")
    for c in summary["cells"]:
        print(f"{c['snr_db']:7.1f} {c['budget']:6d} {c['scheme']:>11} {c['nmse_db']:9.3f} "
              f"{c['se_mean']:8.4f} {c['se_normalized']:8.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--jobs", type=int, default=1, help="worker threads for torch")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lecln", description="LiDAR-enhanced CSI learning pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate the paired dataset")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", choices=("a", "b"), required=True)
    t.add_argument("--budget", type=int, default=8, choices=(8, 16, 32))
    t.add_argument("--variant", default="full", choices=VARIANTS + ("all",))
    t.add_argument("--data", default="data")
    t.add_argument("--out", default="runs")
    t.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="run the evaluation sweep")
    e.add_argument("--models", default="runs")
    e.add_argument("--out", default="results")
    e.add_argument("--realizations", type=int)
    e.add_argument("--timing", action="store_true", help="record wall_ms (makes the CSV non-deterministic)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", parents=[common], help="rebuild summary and curves from a results CSV")
    r.add_argument("--out", default="results")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.jobs))
    try:
        return args.func(args)
    except (ConfigError, ConfigHashMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"runtime error: {e} (last good checkpoint kept)", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
