"""CSV metrics and the versioned JSON run summary."""

from __future__ import annotations

import csv
import io
import json
import math
import platform
from pathlib import Path
from typing import Iterable, Sequence

from .. import __version__
from .._backend import BACKEND

SUMMARY_SCHEMA = "scalecl.summary/1"


def metrics_columns(n_tasks: int) -> list[str]:
    return (
        ["run_id", "seed", "task", "phase"]
        + [f"acc_t{i:02d}" for i in range(1, n_tasks + 1)]
        + ["acc_1T", "acc_pt", "val_1T", "val_pt",
           "n_task", "n_replay_task", "n_saved", "n_consol", "trp", "dedup_relaxed"]
    )


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def format_csv(rows: Iterable[dict], n_tasks: int) -> str:
    cols = metrics_columns(n_tasks)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([_cell(row.get(c)) for c in cols])
    return buf.getvalue()


def write_csv(path: str | Path, rows: Sequence[dict], n_tasks: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_csv(rows, n_tasks))
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_summary(cfg, result, extra: dict | None = None) -> dict:
    """Everything that is not byte-stable (timing, host) lives here, not in the CSV."""
    per_seed = {}
    for seed, res in result.per_seed.items():
        per_seed[str(seed)] = {
            "final": {k: v for k, v in res.final.items() if k not in ("run_id", "seed", "phase")},
            "ledger": res.ledger.rows(),
            "info": res.info,
        }
    out = {
        "schema": SUMMARY_SCHEMA,
        "package_version": __version__,
        "run_id": cfg.name,
        "setting": cfg.setting,
        "strategy": cfg.merge.strategy,
        "seeds": list(result.per_seed),
        "config": cfg.to_dict(),
        "summary": result.summary,
        "per_seed": per_seed,
        "timing": {"wall_clock_s": result.wall_clock},
        "host": {"python": platform.python_version(), "kernels": BACKEND},
    }
    if extra:
        out.update(extra)
    return out


def write_summary(path: str | Path, summary: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=False, default=_json_default) + "\n")
    return path


def read_summary(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    schema = data.get("schema", "")
    if not schema.startswith("scalecl.summary/"):
        raise ValueError(f"{path}: not a run summary")
    if int(schema.rsplit("/", 1)[1]) > int(SUMMARY_SCHEMA.rsplit("/", 1)[1]):
        raise ValueError(f"{path}: summary schema {schema} is newer than supported")
    return data


def _json_default(o):
    import numpy as np

    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
