"""Hard dice, classification diagnostics and the multi-run results table."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMPROVEMENT_MARGIN = 0.005


def dice_score(pred, gt) -> float:
    """2|A n B| / (|A| + |B|) on binary masks; 1.0 when both are empty."""
    a = np.asarray(pred)
    b = np.asarray(gt)
    if a.shape != b.shape:
        raise ValueError(f"dice_score: shapes {a.shape} and {b.shape} differ")
    if not (np.isin(a, (0, 1)).all() and np.isin(b, (0, 1)).all()):
        raise ValueError("dice_score: masks must be binary")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def predicted_classes(logits) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(np.asarray(logits), axis=1)


def classification_accuracy(logits, labels) -> float:
    y = np.asarray(labels).reshape(-1)
    if y.size == 0:
        return float("nan")
    return float((predicted_classes(logits) == y).mean())


def confusion_matrix(logits, labels, num_classes: int = 3) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y = np.asarray(labels).reshape(-1)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (y, predicted_classes(logits)), 1)
    return m


@dataclass
class RunResult:
    run_id: int
    mode: str  # "single" | "multi"
    val_dice: list[float] = field(default_factory=list)
    test_dice: list[float] = field(default_factory=list)
    accuracy: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("single", "multi"):
            raise ValueError(f"mode must be 'single' or 'multi', got {self.mode!r}")

    @property
    def mean_val_dice(self) -> float:
        return float(np.mean(self.val_dice)) if self.val_dice else float("nan")

    @property
    def mean_test_dice(self) -> float:
        return float(np.mean(self.test_dice)) if self.test_dice else float("nan")


@dataclass
class RunReport:
    pairs: list[tuple[RunResult, RunResult]]
    mean_val: dict[str, float]
    mean_test: dict[str, float]
    improved_val: int
    improved_test: int

    @property
    def runs(self) -> int:
        return len(self.pairs)


def aggregate_runs(results: list[RunResult], margin: float = IMPROVEMENT_MARGIN) -> RunReport:
    """Pair single/multi results per run id and average the per-run means.

    ``improved_*`` counts runs where multi reaches single + ``margin`` or better.
    """
    by_run: dict[int, dict[str, RunResult]] = {}
    for r in results:
        slot = by_run.setdefault(r.run_id, {})
        if r.mode in slot:
            raise ValueError(f"run {r.run_id} has two {r.mode} results")
        slot[r.mode] = r
    pairs = []
    for run_id in sorted(by_run):
        slot = by_run[run_id]
        if set(slot) != {"single", "multi"}:
            raise ValueError(f"run {run_id} is unpaired: has only {sorted(slot)}")
        pairs.append((slot["single"], slot["multi"]))
    if not pairs:
        raise ValueError("aggregate_runs needs at least one paired run")
    mean_val = {m: float(np.mean([p[i].mean_val_dice for p in pairs])) for i, m in enumerate(("single", "multi"))}
    mean_test = {m: float(np.mean([p[i].mean_test_dice for p in pairs])) for i, m in enumerate(("single", "multi"))}
    improved_val = sum(m.mean_val_dice >= s.mean_val_dice + margin for s, m in pairs)
    improved_test = sum(m.mean_test_dice >= s.mean_test_dice + margin for s, m in pairs)
    return RunReport(pairs, mean_val, mean_test, improved_val, improved_test)


def fmt2(x: float) -> str:
    """Two-decimal display, rounding halves up as a table reader would."""
    if x != x:
        return "n/a"
    return f"{np.floor(x * 100 + 0.5) / 100:.2f}"


REPORT_CSV_FIELDS = ["seed", "mode", "mean_val_dice", "mean_test_dice", "accuracy"]


def write_report_csv(report: RunReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_CSV_FIELDS)
        for pair in report.pairs:
            for r in pair:
                acc = "" if r.accuracy is None else repr(float(r.accuracy))
                w.writerow([r.run_id, r.mode, repr(r.mean_val_dice), repr(r.mean_test_dice), acc])


def read_report_csv(path) -> list[RunResult]:
    """Rebuild per-run results (means only) from ``report.csv``."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc = float(row["accuracy"]) if row["accuracy"] else None
            out.append(RunResult(int(row["seed"]), row["mode"], [float(row["mean_val_dice"])],
                                 [float(row["mean_test_dice"])], acc))
    return out


def report_markdown(report: RunReport) -> str:
    lines = [
        "Validation and test results for each run (mean dice).",
        "",
        "| Run | Validation Single Task | Validation Multi Task | Test Single Task | Test Multi Task |",
        "|-----|------|------|------|------|",
    ]
    for s, m in report.pairs:
        lines.append(f"| {s.run_id} | {fmt2(s.mean_val_dice)} | {fmt2(m.mean_val_dice)} | "
                     f"{fmt2(s.mean_test_dice)} | {fmt2(m.mean_test_dice)} |")
    lines.append(f"| Mean Dice | {fmt2(report.mean_val['single'])} | {fmt2(report.mean_val['multi'])} | "
                 f"{fmt2(report.mean_test['single'])} | {fmt2(report.mean_test['multi'])} |")
    lines += [
        "",
        f"Full precision means: validation single {report.mean_val['single']:.6f}, "
        f"multi {report.mean_val['multi']:.6f}; test single {report.mean_test['single']:.6f}, "
        f"multi {report.mean_test['multi']:.6f}.",
        f"Runs where multi-task reaches single-task + {IMPROVEMENT_MARGIN}: "
        f"validation {report.improved_val} of {report.runs}, test {report.improved_test} of {report.runs}.",
    ]
    return "\n".join(lines) + "\n"


def write_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(report, out / "report.csv")
    (out / "report.md").write_text(report_markdown(report))
