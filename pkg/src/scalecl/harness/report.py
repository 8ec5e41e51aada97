"""Plot-ready data tables built from finished runs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from ..schedule import simulate_budget
from .metrics import read_summary

# (rr, csr) pairs of the matched-budget comparison
TRP_GRID: tuple[tuple[float, float], ...] = (
    (0.1, 0.39), (0.25, 0.27), (0.1, 0.50), (0.25, 0.40),
    (0.5, 0.10), (0.25, 1.0), (1.0, 0.0),
)


def find_summaries(root: str | Path) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(root.rglob("summary.json"))


def _write(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in r])
    return path


def trp_table(n_tasks: int = 20, grid=TRP_GRID, runs: Sequence[dict] = ()) -> list[tuple]:
    """Budget arithmetic per (rr, csr), joined with any measured runs."""
    measured = {}
    for s in runs:
        c = s["config"]
        if c["stream"]["n_tasks"] != n_tasks or s["setting"] == "TIL":
            continue
        measured.setdefault((c["rr"], c["csr"]), []).append(s["summary"])
    rows = []
    for rr, csr in list(grid) + sorted(set(measured) - set(grid)):
        sim = simulate_budget(rr, csr, n_tasks=n_tasks).trp()
        got = measured.get((rr, csr), [])
        acc = sum(g["acc_1T"] for g in got) / len(got) if got else None
        trp = sum(g["trp"] for g in got) / len(got) if got else None
        rows.append((rr, csr, sim, trp, acc))
    return rows


def _key(s: dict) -> tuple:
    c = s["config"]
    return (s["setting"], s["strategy"], c["stream"]["n_tasks"], c["rr"], c["csr"])


def accuracy_rows(runs: Sequence[dict]) -> list[tuple]:
    rows = []
    for s in sorted(runs, key=_key):
        summ = s["summary"]
        rows.append(_key(s) + (summ["trp"], summ["acc_1T"], summ["acc_pt"], len(s["seeds"]), s["run_id"]))
    return rows


def per_task_rows(runs: Sequence[dict]) -> list[tuple]:
    rows = []
    for s in sorted(runs, key=lambda r: r["run_id"]):
        n = s["config"]["stream"]["n_tasks"]
        for seed, rec in s["per_seed"].items():
            fin = rec["final"]
            for i in range(1, n + 1):
                v = fin.get(f"acc_t{i:02d}")
                if v is not None:
                    rows.append((s["run_id"], seed, i, v))
    return rows


def build_report(inputs: Sequence[str | Path], out_dir: str | Path, n_tasks: int = 20) -> list[Path]:
    """Write ``trp_table.csv``, ``accuracy_vs_rr.csv``, ``accuracy_vs_tasks.csv`` and ``per_task.csv``."""
    out = Path(out_dir)
    runs = [read_summary(p) for root in inputs for p in find_summaries(root)]
    acc = accuracy_rows(runs)
    head = ["setting", "strategy", "n_tasks", "rr", "csr", "trp", "acc_1T", "acc_pt", "n_seeds", "run_id"]
    by_tasks = sorted(acc, key=lambda r: (r[0], r[1], r[3], r[4], r[2]))
    return [
        _write(out / "trp_table.csv", ["rr", "csr", "trp_budget", "trp_measured", "acc_1T"],
               trp_table(n_tasks, runs=runs)),
        _write(out / "accuracy_vs_rr.csv", head, acc),
        _write(out / "accuracy_vs_tasks.csv", head, by_tasks),
        _write(out / "per_task.csv", ["run_id", "seed", "task", "accuracy"], per_task_rows(runs)),
    ]
