"""
Benchmark runner: the (strategy x K x fold x organ) cross-product, one
adaptation + evaluation per cell, written as CSV/JSON with resumable shards.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import multiprocessing
import numpy as np
import torch

from ..errors import ConfigError
from ..nets import TrainStrategy
from ..phantoms import DatasetSpec, build_fewshot_task
from .inference import binarize_and_largest_cc, dice_score
from .training import AdaptConfig, Checkpoint, adapt, predict_query

log = logging.getLogger(__name__)

CSV_FIELDS = ["organ", "strategy", "K", "fold", "gamma", "dsc", "n_trainable", "status", "config_hash"]
TIMING_FIELDS = ["organ", "strategy", "K", "fold", "gamma", "seconds"]


@dataclass
class BenchmarkConfig:
    strategies: Sequence = ("ADAPTER",)
    shots: Sequence[int] = (1,)
    folds: int = 1
    organs: Sequence[int] = (0,)
    gammas: Sequence[float] = (0.2,)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.strategies = [TrainStrategy.parse(s) for s in self.strategies]
        self.shots = [int(k) for k in self.shots]
        if any(k < 1 for k in self.shots):
            raise ConfigError("shots must be >= 1")
        if self.folds < 1:
            raise ConfigError("folds must be >= 1")

    def cells(self) -> list[tuple]:
        out = []
        for s in self.strategies:
            gammas = list(self.gammas) if s is TrainStrategy.ADAPTER_TI else [None]
            for K in self.shots:
                for organ in self.organs:
                    for fold in range(self.folds):
                        for g in gammas:
                            out.append((int(organ), s.value, K, fold, g))
        return out


@dataclass
class TaskFactory:
    """Builds the few-shot task of a (organ, K, fold) cell; picklable for workers."""

    target: DatasetSpec
    seed: int = 0
    prep: dict | None = None
    query: DatasetSpec | None = None

    def __call__(self, organ: int, K: int, fold: int):
        return build_fewshot_task(
            self.target, organ, K, cell_seed(self.seed, "task", fold), self.prep, query_spec=self.query
        )


def cell_seed(*parts) -> int:
    return zlib.crc32(json.dumps([str(p) for p in parts]).encode()) & 0x7FFFFFFF


def cell_key(cell) -> str:
    organ, strategy, K, fold, g = cell
    gs = "none" if g is None else f"{g:g}"
    return f"{strategy}_K{K}_o{organ}_f{fold}_g{gs}"


@dataclass
class EvalResult:
    rows: list
    timings: list = field(default_factory=list)
    config_hash: str = ""
    organ_names: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in CSV_FIELDS})
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=TIMING_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.timings:
            w.writerow({k: _fmt(r.get(k)) for k in TIMING_FIELDS})
        return buf.getvalue()

    def summary(self) -> str:
        return summary_table(self.rows, self.organ_names)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


def group_label(strategy: str, gamma) -> str:
    if gamma in (None, "", "none"):
        return strategy
    return f"{strategy}(g={float(gamma):g})"


def summary_means(rows) -> dict:
    """``{(K, method): {organ: mean DSC over folds, ..., "Avg": mean of organs}}``."""
    groups: dict = {}
    for r in rows:
        key = (int(r["K"]), group_label(r["strategy"], r.get("gamma")))
        groups.setdefault(key, {}).setdefault(int(r["organ"]), []).append(float(r["dsc"]))
    out = {}
    for key in sorted(groups):
        per = {o: float(np.mean(v)) for o, v in sorted(groups[key].items())}
        vals = [v for v in per.values() if not np.isnan(v)]
        per["Avg"] = float(np.mean(vals)) if vals else float("nan")
        out[key] = per
    return out


def summary_table(rows, organ_names: dict | None = None) -> str:
    """Plain-text table: one line per (K, method), organ columns + Avg."""
    organ_names = organ_names or {}
    organs = sorted({int(r["organ"]) for r in rows})
    names = [str(organ_names.get(o, o)) for o in organs]
    head = f"{'K':>3}  {'method':<22}" + "".join(f"{n:>10}" for n in names) + f"{'Avg':>10}"
    lines = [head, "-" * len(head)]
    for (K, label), per in summary_means(rows).items():
        vals = [per.get(o, float("nan")) for o in organs] + [per["Avg"]]
        lines.append(f"{K:>3}  {label:<22}" + "".join(f"{v:>10.3f}" for v in vals))
    return "\n".join(lines)


def evaluate_task(model, task, patch_size=(32, 32, 32), overlap: float = 0.5, threshold: float = 0.5) -> float:
    """Query DSC after thresholding and largest-component filtering."""
    probs = predict_query(model, task.query, patch_size, overlap)
    pred = binarize_and_largest_cc(probs, threshold)
    return dice_score(pred, task.query_gt)


def run_cell(checkpoint, factory: Callable, cell, cfg: BenchmarkConfig, config_hash: str = "") -> tuple[dict, float]:
    organ, strategy, K, fold, gamma = cell
    t0 = time.perf_counter()
    row = {"organ": organ, "strategy": strategy, "K": K, "fold": fold, "gamma": gamma, "config_hash": config_hash}
    try:
        if isinstance(checkpoint, (str, Path)):
            checkpoint = Checkpoint.load(checkpoint)
        task = factory(organ, K, fold)
        acfg = replace(
            cfg.adapt,
            strategy=strategy,
            K=K,
            gamma=cfg.adapt.gamma if gamma is None else float(gamma),
            seed=cell_seed(cfg.seed, "adapt", organ, K, fold),
        )
        res = adapt(checkpoint, task, acfg)
        row["dsc"] = evaluate_task(res.model, task, acfg.patch_size, acfg.overlap, cfg.threshold)
        row["n_trainable"] = res.n_trainable
        row["status"] = "ok"
    except Exception as exc:  # recorded per cell; the run carries on
        log.warning("cell %s failed: %s", cell_key(cell), exc)
        row.update(dsc=float("nan"), n_trainable="", status=f"error: {type(exc).__name__}: {exc}")
    return row, time.perf_counter() - t0


def _worker(args):
    torch.set_num_threads(1)
    return run_cell(*args)


def run_benchmark(
    checkpoint,
    factory: Callable,
    cfg: BenchmarkConfig,
    *,
    out_dir=None,
    config_hash: str = "",
    workers: int = 1,
    resume: bool = True,
    organ_names: dict | None = None,
) -> EvalResult:
    """Run every cell, reusing shards already in ``out_dir/cells`` when resuming.

    ``checkpoint`` may be a loaded :class:`Checkpoint` or a path. Cell results
    are independent of execution order and worker count.
    """
    cells = cfg.cells()
    shard_dir = Path(out_dir) / "cells" if out_dir else None
    if shard_dir:
        shard_dir.mkdir(parents=True, exist_ok=True)
    done: dict = {}
    if shard_dir and resume:
        for c in cells:
            p = shard_dir / f"{cell_key(c)}.json"
            if p.exists():
                rec = json.loads(p.read_text())
                if rec["row"].get("config_hash") == config_hash and rec["row"].get("status") == "ok":
                    done[cell_key(c)] = (rec["row"], rec["seconds"])
    todo = [c for c in cells if cell_key(c) not in done]
    log.info("benchmark: %d cells (%d cached)", len(cells), len(done))

    def store(c, result):
        done[cell_key(c)] = result
        if shard_dir:
            row, secs = result
            (shard_dir / f"{cell_key(c)}.json").write_text(json.dumps({"row": row, "seconds": secs}, sort_keys=True))

    if workers > 1 and todo:
        if not isinstance(checkpoint, (str, Path)):
            raise ConfigError("parallel benchmark needs a checkpoint path")
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
            for c, result in zip(todo, ex.map(_worker, [(checkpoint, factory, c, cfg, config_hash) for c in todo])):
                store(c, result)
    else:
        if isinstance(checkpoint, (str, Path)) and Path(checkpoint).exists():
            checkpoint = Checkpoint.load(checkpoint)
        for c in todo:
            store(c, run_cell(checkpoint, factory, c, cfg, config_hash))

    rows, timings = [], []
    for c in cells:
        row, secs = done[cell_key(c)]
        rows.append(row)
        timings.append({k: row[k] for k in ("organ", "strategy", "K", "fold", "gamma")} | {"seconds": secs})
    return EvalResult(rows, timings, config_hash, organ_names or {})


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "platform": platform.platform(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "threads": torch.get_num_threads(),
    }


def write_results(result: EvalResult, out_dir, manifest: dict | None = None) -> dict:
    """``results.csv`` (deterministic), ``timings.csv`` and ``results.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.to_csv())
    (out / "timings.csv").write_text(result.timings_csv())
    n_params = {}
    for r in result.rows:
        if r.get("status") == "ok":
            n_params[r["strategy"]] = r["n_trainable"]
    doc = {
        "config_hash": result.config_hash,
        "environment": environment_fingerprint(),
        "n_cells": len(result.rows),
        "n_failed": sum(1 for r in result.rows if r.get("status") != "ok"),
        "trainable_parameters": n_params,
        "summary": [
            {"K": K, "method": m, **{str(o): v for o, v in per.items()}}
            for (K, m), per in summary_means([r for r in result.rows if r.get("status") == "ok"]).items()
        ],
        **(manifest or {}),
    }
    (out / "results.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
