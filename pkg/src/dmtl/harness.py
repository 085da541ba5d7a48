"""Experiment plumbing shared by the command-line tools: run evaluation and the split study."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import load_samples, read_manifest, split_patients
from .data.formats import FormatError
from .data.split import SplitSpec
from .metrics import RunResult, aggregate_runs, write_report
from .model import DMTLModel, load_checkpoint
from .train import EvalResult, evaluate, train

log = logging.getLogger(__name__)

METRICS_FIELDS = ["split", "patient_id", "label", "dice", "pred_class"]
TIMING_NAME = "study_timing.csv"


class RunFailure(RuntimeError):
    """A sub-run of the split study failed; ``cause`` keeps the original error."""

    def __init__(self, seed: int, mode: str, cause: BaseException):
        super().__init__(f"run seed={seed} mode={mode} failed: {type(cause).__name__}: {cause}")
        self.seed, self.mode, self.cause = seed, mode, cause


class DataError(Exception):
    """Dataset missing or unreadable."""


def load_data(fn, *args):
    """Call a dataset reader, reporting missing or malformed input as ``DataError``."""
    try:
        return fn(*args)
    except FormatError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc


def load_splits(data_root, split_seed: int):
    manifest = load_data(read_manifest, data_root)
    return tuple(load_data(load_samples, m) for m in split_patients(manifest, SplitSpec(seed=split_seed)))


def check_compatible(model: DMTLModel, patch) -> None:
    model.config.check_input_dims(patch)


def write_metrics(results: dict[str, EvalResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for split, ev in results.items():
            preds = np.argmax(ev.logits, axis=1) if ev.logits is not None else [None] * len(ev.dice)
            for pid, lab, d, pc in zip(ev.patient_ids, ev.labels, ev.dice, preds):
                w.writerow([split, pid, lab, repr(float(d)), "" if pc is None else int(pc)])


def read_metrics(path) -> dict[str, dict]:
    """Per split: dice list, labels and predicted classes (None without a classifier)."""
    out: dict[str, dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            slot = out.setdefault(row["split"], {"dice": [], "labels": [], "pred": []})
            slot["dice"].append(float(row["dice"]))
            slot["labels"].append(int(row["label"]))
            slot["pred"].append(int(row["pred_class"]) if row["pred_class"] else None)
    return out


def run_result_from_metrics(path, run_id: int, mode: str) -> RunResult:
    m = read_metrics(path)
    test = m.get("test", {"dice": [], "labels": [], "pred": []})
    acc = None
    if test["pred"] and all(p is not None for p in test["pred"]):
        acc = float(np.mean(np.array(test["pred"]) == np.array(test["labels"])))
    return RunResult(run_id, mode, m.get("val", {}).get("dice", []), test["dice"], acc)


def train_and_evaluate(cfg: ExperimentConfig, out_dir, splits=None) -> dict[str, EvalResult]:
    """Train, then score the best checkpoint on validation and test; writes ``metrics.csv``."""
    out = Path(out_dir)
    train_s, val_s, test_s = splits or load_splits(cfg.data_root, cfg.split_seed)
    result = train(cfg, out, samples=(train_s, val_s))
    best = load_checkpoint(out / "model_best.ckpt")
    evals = {
        "val": evaluate(best, val_s, cfg.patch, cfg.stride, cfg.threshold),
        "test": evaluate(best, test_s, cfg.patch, cfg.stride, cfg.threshold),
    }
    write_metrics(evals, out / "metrics.csv")
    log.info("%s: best epoch %d, val dice %.4f, test dice %.4f", out, result.best_epoch,
             evals["val"].mean_dice, evals["test"].mean_dice)
    return evals


def run_dir(out_dir, seed: int, mode: str) -> Path:
    return Path(out_dir) / f"run{seed}" / mode


def _job(args) -> tuple[int, str, float, float]:
    cfg, seed, mode, out_dir = args
    sub = dataclasses.replace(cfg, split_seed=seed, mode=mode, out_dir=str(run_dir(out_dir, seed, mode)))
    t0, c0 = time.perf_counter(), time.process_time()
    try:
        train_and_evaluate(sub, sub.out_dir)
    except Exception as exc:
        raise RunFailure(seed, mode, exc) from exc
    return seed, mode, time.perf_counter() - t0, time.process_time() - c0


def compare(cfg: ExperimentConfig, runs: int, out_dir, workers: int = 1):
    """Split seeds 1..runs, each trained single-task and multi-task with otherwise equal configs."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(cfg.dumps())
    jobs = [(cfg, seed, mode, str(out)) for seed in range(1, runs + 1) for mode in ("single", "multi")]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            timings = list(pool.map(_job, jobs))
    else:
        timings = [_job(j) for j in jobs]
    total = time.perf_counter() - t0
    write_timing(timings, total, workers, out / TIMING_NAME)
    return build_report(out, runs)


def build_report(out_dir, runs: int | None = None):
    """Aggregate every ``run*/{single,multi}/metrics.csv`` under ``out_dir`` into report files."""
    out = Path(out_dir)
    seeds = sorted(int(p.name[3:]) for p in out.glob("run*") if p.is_dir() and p.name[3:].isdigit())
    if runs is not None:
        seeds = [s for s in seeds if s <= runs]
    results = [run_result_from_metrics(run_dir(out, s, m) / "metrics.csv", s, m)
               for s in seeds for m in ("single", "multi")]
    report = aggregate_runs(results)
    write_report(report, out)
    return report


def write_timing(timings, total: float, workers: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "mode", "wall_seconds", "cpu_seconds"])
        for seed, mode, wall, cpu in timings:
            w.writerow([seed, mode, f"{wall:.1f}", f"{cpu:.1f}"])
        w.writerow(["total", f"workers={workers}", f"{total:.1f}", ""])
        w.writerow(["host", f"cpus={os.cpu_count()}", "", ""])


def read_timing(path) -> tuple[list[tuple[int, str, float]], float]:
    jobs, total = [], float("nan")
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["seed"] == "total":
                total = float(row["wall_seconds"])
            elif row["seed"].isdigit():
                jobs.append((int(row["seed"]), row["mode"], float(row["wall_seconds"])))
    return jobs, total


def projected_makespan(durations, workers: int) -> float:
    """Longest-processing-time-first schedule length of independent jobs on ``workers`` slots."""
    slots = [0.0] * max(1, workers)
    for d in sorted(durations, reverse=True):
        i = slots.index(min(slots))
        slots[i] += d
    return max(slots)
