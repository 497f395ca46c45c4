"""Glue between datasets, the two training stages and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .dataset import Split
from .model import (CiCnn, LeCln, StageAInputs, TrainingDiverged, TrainResult, prepare_stage_a, stage_b_tensors,
                    train_stage_a, train_stage_b)
from .nn import TrainConfig
from .tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "lr", "train_loss", "val_loss")


def stage_a_dir(root, budget: int, variant: str) -> Path:
    return Path(root) / f"stage_a_b{budget}_{variant}"


def stage_b_dir(root) -> Path:
    return Path(root) / "stage_b"


def y_rms(split: Split, budget: int) -> float:
    y = split.y[budget]
    v = float(np.sqrt(np.mean(np.square(y, dtype=np.float64)))) if y.size else 1.0
    return v if v > 0 else 1.0


def stage_a_inputs(model: LeCln, split: Split, cfg: RunConfig, budget: int) -> StageAInputs:
    return prepare_stage_a(model, split.y[budget], split.img, split.o1, split.theta_k, split.H_P(cfg))


def write_loss_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["train_loss"])),
                        "" if not math.isfinite(row["val_loss"]) else repr(float(row["val_loss"]))])


def read_loss_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append({"epoch": int(rec["epoch"]), "lr": float(rec["lr"]), "train_loss": float(rec["train_loss"]),
                        "val_loss": float(rec["val_loss"]) if rec["val_loss"] else math.nan})
    return out


def _load_params(target: dict, arrays: dict) -> None:
    missing = set(target) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    with torch.no_grad():
        for k, t in target.items():
            src = torch.from_numpy(np.asarray(arrays[k])).to(t.dtype)
            if src.shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {tuple(src.shape)} != model {tuple(t.shape)}")
            t.copy_(src)


def _checkpointer(directory: Path, params: dict, cfg: RunConfig, extra: dict, history: list[dict]):
    def on_epoch(epoch: int, res: TrainResult) -> None:
        save_checkpoint(directory, params, config_hash=cfg.hash(), epoch=res.epoch, adam=res.adam, extra=extra)
        write_loss_csv(directory / "loss.csv", history + res.history)
    return on_epoch


def _run(params: dict, directory: Optional[Path], cfg: RunConfig, extra: dict, train_fn, resume: bool):
    start, adam, history = 0, None, []
    if directory is not None and resume and (directory / "manifest.json").is_file():
        ck = load_checkpoint(directory, expect_hash=cfg.hash())
        _load_params(params, ck["params"])
        start, adam = ck["epoch"], ck["adam"]
        if (directory / "loss.csv").is_file():
            history = [h for h in read_loss_csv(directory / "loss.csv") if h["epoch"] < start]
        log.info("resuming %s at epoch %d", directory, start)
    on_epoch = None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        on_epoch = _checkpointer(directory, params, cfg, extra, history)
    try:
        res = train_fn(adam=adam, start_epoch=start, on_epoch=on_epoch)
    except TrainingDiverged as e:
        if directory is not None:
            save_checkpoint(directory, e.last_good, config_hash=cfg.hash(), epoch=e.epoch, extra=extra)
        raise
    res.history = history + res.history
    if directory is not None and start >= cfg.train.epochs:
        write_loss_csv(directory / "loss.csv", res.history)
    return res


def run_stage_a(cfg: RunConfig, train: Split, val: Optional[Split], budget: int, variant: str = "full",
                directory=None, resume: bool = True, train_cfg: Optional[TrainConfig] = None):
    tc = train_cfg or cfg.train
    model = LeCln(cfg.dims(budget), variant=variant, seed=tc.seed + budget)
    model.y_scale = y_rms(train, budget)
    inp = stage_a_inputs(model, train, cfg, budget)
    vin = stage_a_inputs(model, val, cfg, budget) if val is not None and len(val) else None
    extra = {"stage": "a", "budget": budget, "variant": variant, "y_scale": model.y_scale,
             "dims": dataclasses.asdict(model.dims)}
    d = Path(directory) if directory is not None else None
    res = _run(model.params, d, cfg, extra, lambda **kw: train_stage_a(model, inp, tc, vin, **kw), resume)
    return model, res


def run_stage_b(cfg: RunConfig, train: Split, val: Optional[Split], directory=None, resume: bool = True,
                train_cfg: Optional[TrainConfig] = None):
    tc = train_cfg or cfg.train
    model = CiCnn(cfg.dims(cfg.features.K_P), seed=tc.seed + 7)
    sets = train.pilot_sets(cfg)
    x, t = stage_b_tensors(train.H, train.users, sets)
    v = stage_b_tensors(val.H, val.users, sets) if val is not None and len(val) else None
    extra = {"stage": "b", "dims": dataclasses.asdict(model.dims)}
    d = Path(directory) if directory is not None else None
    res = _run(model.params, d, cfg, extra, lambda **kw: train_stage_b(model, x, t, tc, v, **kw), resume)
    return model, res


def load_stage_a(directory, cfg: RunConfig) -> LeCln:
    ck = load_checkpoint(directory, expect_hash=cfg.hash())
    ex = ck["extra"]
    model = LeCln(cfg.dims(int(ex["budget"])), variant=ex["variant"])
    _load_params(model.params, ck["params"])
    model.y_scale = float(ex["y_scale"])
    return model


def load_stage_b(directory, cfg: RunConfig) -> CiCnn:
    ck = load_checkpoint(directory, expect_hash=cfg.hash())
    model = CiCnn(cfg.dims(cfg.features.K_P))
    _load_params(model.params, ck["params"])
    return model
