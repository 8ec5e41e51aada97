"""Command line entry point: ``scalecl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .harness import metrics
from .harness.config import ConfigError, ExperimentConfig, dump_config, load_config, parse_override
from .harness.data import generate_stream
from .harness.report import build_report
from .harness.runner import (
    PhaseError,
    evaluate,
    linear_probe,
    load_model,
    pretrain,
    run_experiment,
    save_model,
    sweep,
)
from .merging import MergeConfig, parallel_merge, sequential_merge, task_vector
from .net import HEAD
from .params import ParamSet, read_checkpoint, save_checkpoint

log = logging.getLogger("scalecl")


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML or JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set merge.alpha=0.5 (repeatable)")


def _seeds(text: str) -> list[int]:
    return [int(s) for s in str(text).split(",") if s.strip()]


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        pre = pretrain(cfg, use_cache=False)
    except Exception as exc:
        raise PhaseError(f"pretrain failed: {exc}") from exc
    net = pre.network()
    save_model(net, out / "theta0.ckpt", config=cfg.to_dict(), phase="pretrain")
    pre.buffer.dump(out / "pt_buffer.sclbuf")
    info = {"val_accuracy": pre.val_accuracy, "test_accuracy": pre.test_accuracy,
            "buffer_entries": len(pre.buffer)}
    (out / "pretrain.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"theta0: PT val {pre.val_accuracy:.4f}  test {pre.test_accuracy:.4f} -> {out}")
    return 0


def _write_run(out: Path, cfg: ExperimentConfig, result, save_models: bool = True) -> None:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_csv(out / "metrics.csv", result.rows, cfg.stream.n_tasks)
    metrics.write_summary(out / "summary.json", metrics.build_summary(cfg, result))
    (out / "config.yaml").write_text(dump_config(cfg))
    if not save_models:
        return
    for seed, res in result.per_seed.items():
        if res.model is None or isinstance(res.model, list):
            continue
        save_model(res.model, out / f"model_seed{seed}.ckpt", config=cfg.to_dict(), seed=seed)


def cmd_run(args) -> int:
    cfg = _config(args)
    seeds = _seeds(args.seed)
    result = run_experiment(cfg, seeds)
    _write_run(Path(args.out_dir), cfg, result, save_models=not args.no_checkpoints)
    s = result.summary
    pt = "" if s["acc_pt"] is None else f"  PT {s['acc_pt']:.4f}"
    print(f"{cfg.name}: 1:{cfg.stream.n_tasks} {s['acc_1T']:.4f}{pt}  TRP {s['trp']:.1f}%  -> {args.out_dir}")
    return 0


def _grid(items: list[str]) -> dict:
    grid = {}
    for item in items:
        key, value = parse_override(item)
        grid[key] = value if isinstance(value, list) else [value]
    return grid


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = _grid(args.grid)
    if args.grid_file:
        grid.update(yaml.safe_load(Path(args.grid_file).read_text()) or {})
    if not grid:
        raise ConfigError("sweep needs at least one --grid axis")
    out = Path(args.out_dir)
    seeds = _seeds(args.seed) if args.seed is not None else None

    def persist(point, result):
        name = result.rows[-1]["run_id"]
        _write_run(out / name, cfg.replace(**point, name=name), result, save_models=False)

    res = sweep(cfg, grid, seeds, on_point=persist)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps({"grid": grid, "points": res.grid,
                                               "best": res.best.name, "best_validation": res.best_score},
                                              indent=2) + "\n")
    (out / "best_config.yaml").write_text(dump_config(res.best))
    print(f"best {res.best.name}: validation {res.best_score:.4f} ({len(res.grid)} points) -> {out}")
    return 0


def cmd_merge(args) -> int:
    base, base_meta, _ = read_checkpoint(args.base)
    inputs = [read_checkpoint(p) for p in args.inputs]
    if args.strategy == "sequential":
        merged = base
        for params, _meta, _ in inputs:
            merged = sequential_merge(merged, params, args.alpha)
        meta = dict(inputs[-1][1])
    else:
        body = [k for k in base if not k.startswith(HEAD)]
        theta0 = base.subset(body)
        taus = [task_vector(p.subset(body), theta0) for p, _m, _ in inputs]
        mcfg = MergeConfig(strategy="parallel", alpha=args.alpha, dare_p=args.dare_p,
                           ties_k=args.ties_k, seed=args.merge_seed)
        merged_body = parallel_merge(theta0, taus, mcfg)
        # the merged body keeps the base head; probe afterwards for new classes
        merged = ParamSet({**merged_body.to_dict(), **{k: base[k] for k in base if k.startswith(HEAD)}})
        meta = dict(base_meta)
    meta["merged_from"] = [str(p) for p in args.inputs]
    save_checkpoint(merged, meta, args.out)
    print(f"{args.strategy} merge of {len(inputs)} checkpoints -> {args.out}")
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args)
    net, meta, _ = load_model(args.checkpoint)
    stream = generate_stream(cfg.stream, int(args.seed))
    tasks = stream.tasks
    parts = [t.train for t in tasks]
    classes = stream.all_classes
    if cfg.setting == "CPT":
        parts.insert(0, stream.pretrain.train)
        classes = list(stream.pretrain.classes) + classes
    X = np.vstack([p.X for p in parts])
    y = np.concatenate([p.y for p in parts])
    W, b = linear_probe(net, X, y, classes, cfg.probe)
    net.set_head(W, b, classes)
    ev = evaluate(net, tasks, cfg.setting, stream.pretrain)
    if args.out:
        save_model(net, args.out, config=cfg.to_dict(), probed_from=str(args.checkpoint))
    pt = "" if ev.pt_acc is None else f"  PT {ev.pt_acc:.4f}"
    print(f"probe: 1:{len(tasks)} {ev.mean:.4f}{pt}")
    return 0


def cmd_report(args) -> int:
    paths = build_report(args.inputs, args.out_dir, n_tasks=args.n_tasks)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scalecl", description="Replay-efficient continual learning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the base model and seed the pre-training buffer")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one experiment config")
    _add_config_args(p)
    p.add_argument("--seed", required=True, help="seed or comma-separated seeds")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-checkpoints", action="store_true", help="skip saving final models")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid search selected by validation accuracy")
    _add_config_args(p)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=[V1,V2]",
                   help="grid axis with YAML list values (repeatable)")
    p.add_argument("--grid-file", help="YAML mapping of axis -> values")
    p.add_argument("--seed", help="seed or comma-separated seeds (default: config seeds)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="merge checkpoints offline")
    p.add_argument("--base", required=True, help="pre-trained base (parallel) or the starting model (sequential)")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--strategy", choices=("sequential", "parallel"), default="sequential")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--dare-p", type=float, default=0.3)
    p.add_argument("--ties-k", type=float, default=0.2)
    p.add_argument("--merge-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("probe", help="fit a linear head on a frozen checkpoint and evaluate it")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", default="0", help="stream seed")
    p.add_argument("--out", help="write the probed checkpoint here")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="build plot data tables from run directories")
    p.add_argument("inputs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-tasks", type=int, default=20)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PhaseError as exc:
        print(f"scalecl {args.command}: aborted: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"scalecl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
