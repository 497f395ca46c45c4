"""Metrics and the experiment sweep behind the NMSE / SE / ablation curves."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import angular_estimate, interpolate_freq, ls_estimate
from .config import ABLATIONS, ExperimentGrid, RunConfig
from .dataset import SPLITS, build_realization, derive_seed, observe
from .model import CiCnn, LeCln, estimate
from .pilots import measure_snr

log = logging.getLogger(__name__)

CSV_COLUMNS = ("snr_db", "budget", "scheme", "realization", "nmse", "nmse_db", "se_bits", "wall_ms")
TOTAL_SYMBOLS = 900


# --- metrics --------------------------------------------------------------------

def nmse(H_hat: np.ndarray, H: np.ndarray) -> float:
    H_hat, H = np.asarray(H_hat), np.asarray(H)
    if H_hat.shape != H.shape:
        raise ValueError(f"shape mismatch {H_hat.shape} vs {H.shape}")
    ref = np.vdot(H, H).real
    if ref == 0:
        raise ValueError("nmse undefined for an all-zero channel")
    d = H_hat - H
    return float(np.vdot(d, d).real / ref)


def to_db(x: float) -> float:
    return 10 * math.log10(x) if x > 0 else -math.inf


def zf_precoder(h_hat: np.ndarray) -> np.ndarray:
    """Unit-norm row ``f`` proportional to ``(h^H h)^-1 h^H``."""
    h_hat = np.asarray(h_hat).ravel()
    p = np.vdot(h_hat, h_hat).real
    if p == 0:
        raise ValueError("zero channel estimate has no ZF precoder")
    f = h_hat.conj() / p
    return f / np.linalg.norm(f)


@dataclass(frozen=True)
class SeBudget:
    N_P: int
    total_symbols: int = TOTAL_SYMBOLS

    def __post_init__(self):
        if not 0 <= self.N_P <= self.total_symbols:
            raise ValueError(f"N_P={self.N_P} outside [0, {self.total_symbols}]")

    @property
    def N_D(self) -> int:
        return self.total_symbols - self.N_P


def spectral_efficiency(f_rows: np.ndarray, H: np.ndarray, sigma2: float, budget: SeBudget) -> float:
    """``(N_D / 900) * mean_m log2(1 + |f_m h_m|^2 / sigma2)``; ``f_rows`` is (N_s, N_t)."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    gains = np.abs(np.einsum("mi,im->m", np.asarray(f_rows), np.asarray(H))) ** 2
    return budget.N_D / budget.total_symbols * float(np.mean(np.log2(1 + gains / sigma2)))


def se_from_estimate(H_hat: np.ndarray, H: np.ndarray, sigma2: float, budget: SeBudget) -> float:
    """SE with a ZF precoder per subcarrier; an all-zero estimated column transmits nothing."""
    f = np.zeros((H.shape[1], H.shape[0]), dtype=complex)
    for m in range(H.shape[1]):
        if np.any(H_hat[:, m]):
            f[m] = zf_precoder(H_hat[:, m])
    return spectral_efficiency(f, H, sigma2, budget)


@dataclass
class NormalizedSe:
    ratio: float
    above_reference: bool


def normalized_se(se_by_scheme: dict, se_reference: float) -> dict:
    if se_reference <= 0:
        raise ValueError("reference SE must be positive")
    return {k: NormalizedSe(ratio=v / se_reference, above_reference=v / se_reference > 1)
            for k, v in se_by_scheme.items()}


# --- experiment ---------------------------------------------------------------------

@dataclass
class ModelBank:
    """Trained networks: stage-A models keyed by ``(budget, variant)`` plus the CI-CNN."""

    stage_a: dict = field(default_factory=dict)
    stage_b: Optional[CiCnn] = None

    def get(self, budget: int, variant: str) -> Optional[LeCln]:
        return self.stage_a.get((budget, variant))


@dataclass
class ResultRow:
    snr_db: float
    budget: int
    scheme: str
    realization: int
    nmse: float
    se_bits: float
    wall_ms: float = float("nan")
    pilot_weight: float = float("nan")
    reason: str = ""

    @property
    def nmse_db(self) -> float:
        return to_db(self.nmse) if math.isfinite(self.nmse) else float("nan")


def _scheme_variant(scheme: str) -> Optional[str]:
    if scheme == "lecln":
        return "full"
    if scheme in ABLATIONS:
        return scheme
    return None


def run_experiment(grid: ExperimentGrid, cfg: RunConfig, models: ModelBank, out_path=None,
                   timing: bool = False, snr_tolerance_db: float = 0.1) -> list[ResultRow]:
    """Sweep (realization, SNR, budget, scheme); optional outputs are written under ``out_path``.

    Every realization draws a fresh scene; all schemes in a cell see the
    same pilot observation.  Rows are returned in (snr, budget, scheme,
    realization) order.  A scheme whose network is missing, or a budget the
    RF chain count cannot realize, yields NaN rows carrying the reason.
    """
    rows: list[ResultRow] = []
    for r in range(grid.realizations):
        user = r % cfg.system.K + 1
        real = build_realization(cfg, derive_seed(grid.seed, SPLITS["eval"], r), user)
        for snr in grid.snr_points_db:
            for budget in grid.measurement_budgets:
                try:
                    obs = observe(cfg, real, budget, snr, derive_seed(grid.seed, r, budget, int(round(snr * 100)) & 0xFFFFFFFF))
                except ValueError as e:
                    rows += [ResultRow(snr, budget, s, r, math.nan, math.nan, reason=str(e)) for s in grid.schemes]
                    continue
                measured = measure_snr(obs.precoder.F_R, real.H, obs.sigma2, per_subcarrier=True)
                if abs(measured - snr) > snr_tolerance_db:
                    raise RuntimeError(f"SNR calibration off: requested {snr} dB, measured {measured:.3f} dB")
                se_budget = SeBudget(N_P=budget)
                for scheme in grid.schemes:
                    t0 = time.perf_counter()
                    weight = math.nan
                    variant = _scheme_variant(scheme)
                    if variant is not None:
                        model = models.get(budget, variant)
                        if model is None or models.stage_b is None:
                            rows.append(ResultRow(snr, budget, scheme, r, math.nan, math.nan,
                                                  reason=f"missing checkpoint for {scheme} at budget {budget}"))
                            continue
                        est = estimate(model, models.stage_b, obs.y[None], real.crop[None], [real.codebook.o1],
                                       [real.theta_k], [real.pilot_set])
                        H_hat = est.H[0]
                        if variant == "full":
                            weight = float(est.pilot_weight()[0])
                    elif scheme == "ls":
                        H_P = ls_estimate(obs.Y_P, obs.precoder.F_R, obs.S_P, obs.precoder.n_rf).H_P
                        H_hat = interpolate_freq(H_P, real.pilot_set, cfg.system.N_s)
                    else:
                        H_P = angular_estimate(scheme, obs.Y_P, obs.precoder.F_R, obs.S_P, real.codebook.A,
                                               obs.precoder.n_rf, obs.sigma2, cfg.features.max_paths)
                        H_hat = interpolate_freq(H_P, real.pilot_set, cfg.system.N_s)
                    wall = (time.perf_counter() - t0) * 1e3 if timing else math.nan
                    e = nmse(H_hat, real.H)
                    se = se_from_estimate(H_hat, real.H, obs.sigma2, se_budget)
                    rows.append(ResultRow(snr, budget, scheme, r, e, se, wall, weight))
        log.info("realization %d / %d done", r + 1, grid.realizations)
    order = {s: i for i, s in enumerate(grid.schemes)}
    rows.sort(key=lambda x: (x.snr_db, x.budget, order[x.scheme], x.realization))
    if out_path is not None:
        write_outputs(rows, out_path, config_hash=cfg.hash())
    return rows


# --- outputs ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def rows_to_csv(rows: list[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([repr(float(r.snr_db)), r.budget, r.scheme, r.realization, _fmt(r.nmse), _fmt(r.nmse_db),
                    _fmt(r.se_bits), _fmt(r.wall_ms)])
    return buf.getvalue()


def read_results_csv(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            f = lambda k: float(rec[k]) if rec[k] != "" else math.nan
            rows.append(ResultRow(snr_db=float(rec["snr_db"]), budget=int(rec["budget"]), scheme=rec["scheme"],
                                  realization=int(rec["realization"]), nmse=f("nmse"), se_bits=f("se_bits"),
                                  wall_ms=f("wall_ms")))
    return rows


def _stats(values: list[float]) -> dict:
    v = np.asarray([x for x in values if math.isfinite(x)], dtype=float)
    n = len(v)
    if n == 0:
        return {"n": 0, "mean": math.nan, "stderr": math.nan}
    se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return {"n": n, "mean": float(v.mean()), "stderr": se}


def summarize(rows: list[ResultRow], reference=("lecln", 8)) -> dict:
    """Per-cell mean and standard error of NMSE, SE and the AFWC pilot weight, plus normalized SE."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r.snr_db, r.budget, r.scheme), []).append(r)
    out = []
    ref_se = {}
    for (snr, budget, scheme), rs in sorted(cells.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        nm = _stats([r.nmse for r in rs])
        se = _stats([r.se_bits for r in rs])
        pw = _stats([r.pilot_weight for r in rs])
        cell = {"snr_db": snr, "budget": budget, "scheme": scheme, "n": nm["n"],
                "nmse_mean": nm["mean"], "nmse_stderr": nm["stderr"],
                "nmse_db": to_db(nm["mean"]) if math.isfinite(nm["mean"]) else math.nan,
                "se_mean": se["mean"], "se_stderr": se["stderr"], "pilot_weight": pw["mean"]}
        out.append(cell)
        if (scheme, budget) == tuple(reference):
            ref_se[snr] = se["mean"]
    for cell in out:
        ref = ref_se.get(cell["snr_db"])
        if ref and math.isfinite(ref) and ref > 0 and math.isfinite(cell["se_mean"]):
            ns = normalized_se({"x": cell["se_mean"]}, ref)["x"]
            cell["se_normalized"], cell["se_above_reference"] = ns.ratio, ns.above_reference
        else:
            cell["se_normalized"], cell["se_above_reference"] = math.nan, False
    return {"reference": {"scheme": reference[0], "budget": reference[1]}, "cells": out}


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _write_tsv(path: Path, header: tuple, rows) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def write_curves(summary: dict, directory) -> list[Path]:
    """Two-column TSV per curve (fig3a/3b/3c/5a/5b) plus the fig5b (snr, budget) table."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    cells = summary["cells"]
    curves: dict = {}

    def add(name, x, y):
        curves.setdefault(name, []).append((x, y))

    for c in cells:
        s, b = c["scheme"], c["budget"]
        if s in ("lecln", "ls", "omp", "amp"):
            add(f"fig3a_{s}_b{b}", c["snr_db"], c["nmse_db"])
            add(f"fig3c_{s}_b{b}", c["snr_db"], c["se_normalized"])
        if s == "lecln":
            add(f"fig3b_lecln_b{b}", c["snr_db"], c["nmse_db"])
            add(f"fig5b_b{b}", c["snr_db"], c["pilot_weight"])
        if s == "lecln" or s in ABLATIONS:
            add(f"fig5a_{s}_b{b}", c["snr_db"], c["nmse_db"])
    written = []
    for name, pts in sorted(curves.items()):
        ycol = "pilot_weight" if name.startswith("fig5b") else (
            "se_normalized" if name.startswith("fig3c") else "nmse_db")
        p = root / f"{name}.tsv"
        _write_tsv(p, ("snr_db", ycol), sorted(pts))
        written.append(p)
    table = sorted((c["snr_db"], c["budget"], c["pilot_weight"]) for c in cells if c["scheme"] == "lecln")
    p = root / "fig5b.tsv"
    _write_tsv(p, ("snr_db", "budget", "pilot_weight"), table)
    written.append(p)
    return written


def write_outputs(rows: list[ResultRow], out_dir, config_hash: str = "") -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(rows_to_csv(rows))
    weights = io.StringIO()
    w = csv.writer(weights, lineterminator="\n")
    w.writerow(("snr_db", "budget", "scheme", "realization", "pilot_weight"))
    for r in rows:
        if math.isfinite(r.pilot_weight):
            w.writerow((repr(float(r.snr_db)), r.budget, r.scheme, r.realization, repr(r.pilot_weight)))
    (out / "weights.csv").write_text(weights.getvalue())
    summary = summarize(rows)
    summary["config_hash"] = config_hash
    summary["failures"] = sorted({r.reason for r in rows if r.reason})
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True))
    write_curves(summary, out / "curves")
    return summary


def attach_weights(rows: list[ResultRow], path) -> None:
    p = Path(path)
    if not p.is_file():
        return
    index = {(r.snr_db, r.budget, r.scheme, r.realization): r for r in rows}
    with open(p, newline="") as fh:
        for rec in csv.DictReader(fh):
            key = (float(rec["snr_db"]), int(rec["budget"]), rec["scheme"], int(rec["realization"]))
            if key in index:
                index[key].pilot_weight = float(rec["pilot_weight"])
