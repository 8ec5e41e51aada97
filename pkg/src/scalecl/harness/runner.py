"""End-to-end experiment driver for the TIL, CIL and CPT protocols."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize

from ..buffer import ReplayBuffer, RetrievalState
from ..losses import LossConfig, log_softmax
from ..merging import (
    EmaTracker,
    ema_adopt,
    ema_extend,
    ema_update,
    parallel_merge,
    sequential_merge,
    task_vector,
)
from ..net import HEAD, NetConfig, Network
from ..params import CheckpointFormatError, ParamSet, StructureError, read_checkpoint, save_checkpoint
from ..schedule import (
    BudgetLedger,
    ConsolidationPlan,
    ReplaySchedule,
    compose_batch,
    consolidation_budget,
    run_consolidation,
)
from ..training import Sampler, accuracy, train_step, warmup_cosine_lr
from .config import ExperimentConfig, ProbeConfig
from .data import Split, Stream, TaskData, generate_stream
from .metrics import metrics_columns

log = logging.getLogger(__name__)

# tags for derived seeds
_HEAD_SEED, _LORA_SEED, _SHUFFLE_SEED, _RETRIEVAL_SEED, _CONSOL_SEED, _BUFFER_SEED = range(1, 7)


class CalibrationError(RuntimeError):
    """Pre-trained model misses its accuracy floor."""


class PhaseError(RuntimeError):
    """A run aborted; the message names the failing phase."""


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- pre-training --------------------------------------------------------------


@dataclass
class Pretrained:
    theta0: ParamSet
    classes: list[int]
    net_config: NetConfig
    val_accuracy: float
    test_accuracy: float
    buffer: ReplayBuffer

    def network(self) -> Network:
        net = Network(NetConfig(**self.net_config.to_dict()), seed=None)
        net.load_params(self.theta0, classes=self.classes)
        return net


_PRETRAIN_CACHE: dict[str, Pretrained] = {}


def _pretrain_key(cfg: ExperimentConfig) -> str:
    s = cfg.stream.to_dict()
    for k in ("n_tasks", "classes_per_task", "train_per_class", "val_per_class", "test_per_class", "rotation"):
        s.pop(k)
    return json.dumps(
        [s, cfg.hidden_dims, vars(cfg.pretrain), vars(cfg.buffer)["capacity"], vars(cfg.optim)],
        sort_keys=True,
    )


def pretrain(cfg: ExperimentConfig, stream: Stream | None = None, use_cache: bool = True) -> Pretrained:
    """Train the base model on the pre-training classes and seed a PT replay buffer.

    Pre-training only depends on the world (not on the run seed), so results
    are cached per configuration.
    """
    key = _pretrain_key(cfg)
    if use_cache and key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key]
    spec = cfg.stream
    stream = stream or generate_stream(spec, 0)
    pt = stream.pretrain
    ncfg = NetConfig(spec.input_dim, list(cfg.hidden_dims), len(pt.classes))
    net = Network(ncfg, seed=derive_seed(spec.world_seed, 0xB0D1), classes=pt.classes)
    pc = cfg.pretrain
    rng = np.random.default_rng(derive_seed(spec.world_seed, 0xB0D2))
    opt = cfg.optim.build()
    X, y = pt.train.X, net.class_index(pt.train.y)
    n = len(y)
    spe = math.ceil(n / pc.batch_size)
    rng_all = (0, net.n_classes)
    plain = LossConfig(decouple_weight=0.0)
    step = 0
    for _epoch in range(pc.epochs):
        perm = rng.permutation(n)
        for b in range(spe):
            idx = perm[b * pc.batch_size:(b + 1) * pc.batch_size]
            lr = warmup_cosine_lr(step / spe, pc.lr, pc.warmup_epochs, pc.epochs)
            train_step(net, opt, lr, X[idx], y[idx], rng_all, [], plain)
            step += 1
    val_acc = accuracy(net, pt.val.X, pt.val.y)
    test_acc = accuracy(net, pt.test.X, pt.test.y)
    if val_acc < pc.accuracy_floor:
        raise CalibrationError(
            f"pre-trained validation accuracy {val_acc:.3f} is below the floor {pc.accuracy_floor:.3f}"
        )
    buf = ReplayBuffer(cfg.buffer.capacity, input_dim=spec.input_dim, seed=spec.world_seed)
    buf.register_classes(0, pt.classes)
    buf.admit_many(pt.train.X, pt.train.y, 0)
    buf.capture_expert_logits(net, pt.classes)
    out = Pretrained(net.param_set(), list(net.classes), ncfg, val_acc, test_acc, buf)
    if use_cache:
        _PRETRAIN_CACHE[key] = out
    return out


def save_model(net: Network, path, config: dict | None = None, **meta) -> None:
    save_checkpoint(net.effective_set(), {"classes": list(net.classes), "net": net.config.to_dict(), **meta},
                    path, config=config)


def load_model(path) -> tuple[Network, dict, dict]:
    """Rebuild a network saved by :func:`save_model`; returns ``(net, meta, config)``."""
    params, meta, config = read_checkpoint(path)
    if "net" not in meta or "classes" not in meta:
        raise CheckpointFormatError(f"{path}: checkpoint carries no network description")
    shape = dict(meta["net"], initial_classes=len(meta["classes"]))
    net = Network(NetConfig(**shape), seed=0, classes=meta["classes"])
    net.load_params(params)
    return net, meta, config


# -- single task training --------------------------------------------------------


@dataclass
class TaskResult:
    net: Network
    val_history: list[float]
    best_epoch: int
    lr_trace: list[float] = field(default_factory=list)


def train_task(
    net: Network,
    task: TaskData,
    cfg: ExperimentConfig,
    *,
    rr: float,
    buffer: ReplayBuffer | None,
    state: RetrievalState | None,
    sampler: Sampler | None,
    rng: np.random.Generator,
    ledger: BudgetLedger,
    lora_seed: int = 0,
    val_fn: Callable[[Network], float] | None = None,
    on_step: Callable[[Network], None] | None = None,
    restrict_eval: bool = False,
    keep_last: bool = False,
) -> TaskResult:
    """Warmup-cosine training on one task; returns the best post-epoch checkpoint.

    The network passed in is trained in place; the returned network is an
    independent copy of the best epoch with any adapters merged.
    """
    X, y = task.train.X, net.class_index(task.train.y)
    cols = net.class_index(task.classes)
    lo, hi = int(cols.min()), int(cols.max()) + 1
    if hi - lo != len(task.classes):
        raise ValueError("task classes must occupy a contiguous block of head rows")
    available = 0
    if buffer is not None and sampler is not None and rr > 0:
        available = _available(buffer, sampler)
    if available == 0:
        rr = 0.0
    sched = ReplaySchedule.from_total(cfg.batch_size, rr)
    if cfg.lora.enabled and "task" in cfg.lora.phases:
        net.attach_lora(cfg.lora.rank, cfg.lora.targets, seed=lora_seed)
    opt = cfg.optim.build()
    n = len(y)
    bt = sched.batch_task_samples
    spe = math.ceil(n / bt)
    if val_fn is None:
        restrict = task.classes if restrict_eval else None

        def val_fn(m):
            return accuracy(m, task.val.X, task.val.y, restrict=restrict)

    history, best, best_score, best_epoch = [], None, -math.inf, -1
    lr_trace = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for b in range(spe):
            idx = perm[b * bt:(b + 1) * bt]
            n_task, n_rep = compose_batch(sched, available, n_task=len(idx))
            entries = sampler.draw(buffer, n_rep, state) if n_rep else []
            lr = warmup_cosine_lr(step / spe, cfg.optim.lr, cfg.warmup_epochs, cfg.epochs)
            lr_trace.append(lr)
            train_step(net, opt, lr, X[idx], y[idx], (lo, hi), entries, cfg.loss)
            ledger.record_task(task.index, n_task, n_rep)
            if on_step is not None:
                on_step(net)
            step += 1
        snap = net.copy()
        if snap.adapters:
            snap.merge_lora()
        score = val_fn(snap)
        history.append(score)
        if score > best_score or keep_last:
            best, best_score, best_epoch = snap, score, epoch
    if net.adapters:
        net.merge_lora()
    return TaskResult(best, history, best_epoch, lr_trace)


def _available(buffer: ReplayBuffer, sampler: Sampler) -> int:
    if sampler.mode == "task":
        tasks = buffer.tasks if sampler.tasks is None else [t for t in buffer.tasks if t in set(sampler.tasks)]
        if sampler.pt_weight == 0:
            tasks = [t for t in tasks if t != 0]
        return sum(buffer.class_count(c) for c in buffer.classes if buffer.class_task[c] in set(tasks))
    if sampler.tasks is not None:
        allowed = set(sampler.tasks)
        return sum(buffer.class_count(c) for c in buffer.classes if buffer.class_task[c] in allowed)
    if sampler.classes is not None:
        return sum(buffer.class_count(c) for c in sampler.classes)
    return len(buffer)


# -- linear probe ----------------------------------------------------------------


def linear_probe(net: Network, X: np.ndarray, labels: np.ndarray, classes: Sequence[int], cfg=None):
    """Fit a softmax head on frozen features with L-BFGS.

    Returns ``(weight, bias)`` with rows ordered like ``classes``. The body
    of ``net`` is not modified.
    """
    cfg = cfg or ProbeConfig()
    F = net.features(np.asarray(X, dtype=np.float64))
    lookup = {int(c): i for i, c in enumerate(classes)}
    y = np.array([lookup[int(c)] for c in labels])
    n, h = F.shape
    k = len(classes)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    Fb = np.hstack([F, np.ones((n, 1))])

    def objective(w):
        W = w.reshape(h + 1, k)
        logp = log_softmax(Fb @ W)
        loss = -np.sum(onehot * logp) / n + 0.5 * cfg.l2 * np.sum(W[:h] ** 2)
        g = Fb.T @ (np.exp(logp) - onehot) / n
        g[:h] += cfg.l2 * W[:h]
        return loss, g.ravel()

    res = minimize(objective, np.zeros((h + 1) * k), jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-9})
    W = res.x.reshape(h + 1, k)
    return W[:h].T.copy(), W[h].copy()


# -- evaluation ------------------------------------------------------------------


@dataclass
class Evaluation:
    task_acc: dict[int, float]
    pt_acc: float | None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.task_acc.values()))) if self.task_acc else float("nan")


def evaluate(
    model,
    tasks: Sequence[TaskData],
    setting: str,
    pretrain_task: TaskData | None = None,
    split: str = "test",
) -> Evaluation:
    """Per-task accuracy, their unweighted mean, and PT accuracy for CPT.

    For TIL ``model`` is a sequence of per-task networks, each scored on its
    own task with the argmax restricted to that task's classes.
    """
    if setting != "TIL":
        missing = {c for t in tasks for c in t.classes} - set(model.classes)
        if missing:
            raise StructureError(f"model head lacks classes {sorted(missing)}")
    acc = {}
    for i, t in enumerate(tasks):
        s: Split = getattr(t, split)
        if setting == "TIL":
            acc[t.index] = accuracy(model[i], s.X, s.y, restrict=t.classes)
        else:
            acc[t.index] = accuracy(model, s.X, s.y)
    pt_acc = None
    if setting == "CPT" and pretrain_task is not None:
        s = getattr(pretrain_task, split)
        pt_acc = accuracy(model, s.X, s.y)
    return Evaluation(acc, pt_acc)


# -- metrics rows ----------------------------------------------------------------


def make_row(cfg, seed, task, phase, ev: Evaluation, ledger: BudgetLedger, relaxed: int,
             val: Evaluation | None = None) -> dict:
    row = {"run_id": cfg.name, "seed": seed, "task": task, "phase": phase}
    for i in range(1, cfg.stream.n_tasks + 1):
        row[f"acc_t{i:02d}"] = ev.task_acc.get(i)
    row["acc_1T"] = ev.mean
    row["acc_pt"] = ev.pt_acc
    row["val_1T"] = val.mean if val is not None else None
    row["val_pt"] = val.pt_acc if val is not None else None
    tot = ledger.totals()
    row.update(tot)
    row["trp"] = ledger.trp() if ledger.tasks and sum(b.n_baseline for b in ledger.tasks.values()) else None
    row["dedup_relaxed"] = relaxed
    return row


# -- full runs -------------------------------------------------------------------


@dataclass
class RunResult:
    rows: list[dict]
    final: dict
    ledger: BudgetLedger
    info: dict = field(default_factory=dict)
    model: Network | list[Network] | None = None


def _sampler(cfg: ExperimentConfig, tasks=None) -> Sampler:
    return Sampler(mode=cfg.retrieval, pt_weight=cfg.pt_weight, tasks=tasks)


def _state(cfg: ExperimentConfig, seed: int) -> RetrievalState:
    return RetrievalState(window=cfg.buffer.window, seed=derive_seed(seed, _RETRIEVAL_SEED),
                          auto_window=cfg.buffer.auto_window)


def _fresh_buffer(cfg: ExperimentConfig, pre: Pretrained, seed: int, with_pt: bool) -> ReplayBuffer:
    if with_pt:
        buf = copy.deepcopy(pre.buffer)
    else:
        buf = ReplayBuffer(cfg.buffer.capacity, input_dim=cfg.stream.input_dim)
    buf.reseed(derive_seed(seed, _BUFFER_SEED))
    return buf


def _empty_head(params: ParamSet) -> ParamSet:
    d = params.to_dict()
    h = d[f"{HEAD}.weight"].shape[1]
    d[f"{HEAD}.weight"] = np.zeros((0, h))
    d[f"{HEAD}.bias"] = np.zeros(0)
    return ParamSet(d)


def _val_all(stream: Stream, seen: Sequence[TaskData], setting: str):
    parts = [t.val for t in seen]
    if setting == "CPT":
        parts.append(stream.pretrain.val)
    X = np.vstack([p.X for p in parts])
    y = np.concatenate([p.y for p in parts])
    return lambda m: accuracy(m, X, y)


def run_til(cfg: ExperimentConfig, seed: int, stream: Stream, pre: Pretrained) -> RunResult:
    ledger = BudgetLedger()
    rng = np.random.default_rng(derive_seed(seed, _SHUFFLE_SEED))
    nets = []
    for task in stream.tasks:
        net = pre.network()
        net.fresh_head(len(task.classes), cfg.head_init_scale,
                       seed=derive_seed(seed, _HEAD_SEED, task.index), class_ids=task.classes)
        res = train_task(net, task, cfg, rr=0.0, buffer=None, state=None, sampler=None, rng=rng,
                         ledger=ledger, lora_seed=derive_seed(seed, _LORA_SEED, task.index),
                         restrict_eval=True)
        nets.append(res.net)
    ev = evaluate(nets, stream.tasks, "TIL")
    val = evaluate(nets, stream.tasks, "TIL", split="val")
    row = make_row(cfg, seed, stream.spec.n_tasks, "final", ev, ledger, 0, val)
    return RunResult([row], row, ledger, model=nets)


def run_sequential(cfg: ExperimentConfig, seed: int, stream: Stream, pre: Pretrained) -> RunResult:
    """No-merge, sequential-merge and EMA runs, with optional consolidation."""
    setting, strategy = cfg.setting, cfg.merge.strategy
    ledger = BudgetLedger()
    rng = np.random.default_rng(derive_seed(seed, _SHUFFLE_SEED))
    buffer = _fresh_buffer(cfg, pre, seed, with_pt=setting == "CPT")
    state = _state(cfg, seed)
    sampler = _sampler(cfg)
    plan = ConsolidationPlan(cfg.csr, cfg.batch_size, cfg.consolidation_chunks,
                             lr=cfg.consolidation_lr, every_k_tasks=cfg.consolidate_every_k_tasks)
    net = pre.network()
    ema = EmaTracker(cfg.merge.lam, net.param_set()) if strategy == "ema" else None

    def ema_step(m: Network):
        ema_update(ema, m.effective_set())

    on_step = ema_step if ema is not None else None
    rows, pending, info = [], 0, {"best_epochs": [], "val_history": []}
    seen: list[TaskData] = []
    T = len(stream.tasks)
    for task in stream.tasks:
        t = task.index
        phase = "task"
        try:
            buffer.register_classes(t, task.classes)
            if setting == "CIL" and t == 1:
                prev = _empty_head(net.param_set())
                net.fresh_head(len(task.classes), cfg.head_init_scale,
                               seed=derive_seed(seed, _HEAD_SEED, t), class_ids=task.classes)
                if ema is not None:
                    ema.shadow = _empty_head(ema.shadow)
            else:
                prev = net.param_set()
                net.grow_head(len(task.classes), cfg.head_init_scale,
                              seed=derive_seed(seed, _HEAD_SEED, t), class_ids=task.classes)
            if ema is not None:
                ema_extend(ema, net.param_set())
            rr = 0.0 if (setting == "CIL" and t == 1) else cfg.rr
            val_fn = _val_all(stream, seen + [task], setting) if cfg.selection == "seen" else None
            res = train_task(net, task, cfg, rr=rr, buffer=buffer, state=state, sampler=sampler,
                             rng=rng, ledger=ledger, lora_seed=derive_seed(seed, _LORA_SEED, t),
                             val_fn=val_fn, on_step=on_step, keep_last=cfg.selection == "last")
            info["best_epochs"].append(res.best_epoch)
            info["val_history"].append(res.val_history)
            best = res.net
            phase = "buffer"
            buffer.admit_many(task.train.X, task.train.y, t)
            buffer.capture_expert_logits(best, task.classes)
            phase = "merge"
            if strategy == "sequential":
                merged = sequential_merge(prev, best.param_set(), cfg.merge.alpha)
                net.load_params(merged, classes=best.classes)
            elif strategy == "ema":
                net.load_params(best.param_set(), classes=best.classes)
            else:
                net = best
            seen.append(task)
            phase = "consolidation"
            pending += ledger.saved_replay(t)
            if cfg.csr > 0 and (t % plan.every_k_tasks == 0 or t == T):
                budget = consolidation_budget(plan, pending)
                pending = 0
                lora_rank = cfg.lora.rank if cfg.lora.enabled and "consolidation" in cfg.lora.phases else None
                covered = [c for d in seen for c in d.classes]
                if setting == "CPT":
                    covered = list(stream.pretrain.classes) + covered
                net = run_consolidation(
                    net, buffer, plan, budget, cfg.loss, state=state, optim=cfg.optim,
                    ledger=ledger, task=t, sampler=Sampler(), required_classes=covered,
                    lora_rank=lora_rank, lora_targets=cfg.lora.targets,
                    seed=derive_seed(seed, _CONSOL_SEED, t),
                    val_fn=_val_all(stream, seen, setting), on_step=on_step,
                )
            if ema is not None:
                ema_adopt(ema, net)
            phase = "evaluate"
            ev = evaluate(net, seen, setting, stream.pretrain)
        except Exception as exc:
            raise PhaseError(f"task {t} failed during {phase}: {exc}") from exc
        val = evaluate(net, seen, setting, stream.pretrain, split="val") if t == T else None
        rows.append(make_row(cfg, seed, t, "task_end", ev, ledger, state.dedup_relaxed, val))
    final = dict(rows[-1])
    return RunResult(rows, final, ledger, info, model=net)


def _parallel_head(net: Network, regime: str, seen_classes, task, seed):
    """Head for one independent fine-tune, following the replay regime."""
    hseed = derive_seed(seed, _HEAD_SEED, task.index)
    if regime == "none":
        net.fresh_head(len(task.classes), 0.01, seed=hseed, class_ids=task.classes)
    elif regime == "pt":
        net.grow_head(len(task.classes), 0.01, seed=hseed, class_ids=task.classes)
    elif regime == "pt+tasks":
        net.grow_head(len(seen_classes), 0.01, seed=hseed, class_ids=seen_classes)
    else:  # CIL "tasks"
        net.fresh_head(len(seen_classes), 0.01, seed=hseed, class_ids=seen_classes)
    return net


def run_parallel(cfg: ExperimentConfig, seed: int, stream: Stream, pre: Pretrained) -> RunResult:
    """Independent fine-tunes from the base model, DARE-TIES merge, linear probe."""
    setting, regime = cfg.setting, cfg.merge.parallel_replay
    ledger = BudgetLedger()
    rng = np.random.default_rng(derive_seed(seed, _SHUFFLE_SEED))
    buffer = _fresh_buffer(cfg, pre, seed, with_pt=setting == "CPT")
    state = _state(cfg, seed)
    keep_pt_head = regime in ("pt", "pt+tasks")
    # the probe replaces the head, so only the body is merged
    theta0 = pre.theta0.subset([k for k in pre.theta0 if not k.startswith(HEAD)])
    taus, head_trace = [], []
    seen_classes: list[int] = []
    replay_tasks = {"none": None, "pt": [0], "tasks": None, "pt+tasks": None}[regime]
    for task in stream.tasks:
        t = task.index
        buffer.register_classes(t, task.classes)
        seen_classes = seen_classes + list(task.classes)
        net = pre.network()
        _parallel_head(net, regime, seen_classes, task, seed)
        head_trace.append({
            "task": t,
            "head_size": net.n_classes,
            "pt_rows_kept": bool(keep_pt_head and np.array_equal(
                net.params[f"{HEAD}.weight"][: len(pre.classes)], pre.theta0[f"{HEAD}.weight"])),
        })
        rr = cfg.rr if regime != "none" else 0.0
        sampler = _sampler(cfg, tasks=replay_tasks)
        try:
            res = train_task(net, task, cfg, rr=rr, buffer=buffer, state=state, sampler=sampler,
                             rng=rng, ledger=ledger, lora_seed=derive_seed(seed, _LORA_SEED, t))
        except Exception as exc:
            raise PhaseError(f"parallel fine-tune {t} failed: {exc}") from exc
        buffer.admit_many(task.train.X, task.train.y, t)
        buffer.capture_expert_logits(res.net, task.classes)
        taus.append(task_vector(res.net.body_set(), theta0))
    try:
        merged = parallel_merge(theta0, taus, cfg.merge)
        net = pre.network()
        net.load_body(merged)
        classes = (list(pre.classes) if setting == "CPT" else []) + seen_classes
        entries = buffer.entries(classes)
        Xp = np.stack([e.x for e in entries])
        yp = np.array([e.label for e in entries])
        W, b = linear_probe(net, Xp, yp, classes, cfg.probe)
        net.set_head(W, b, classes)
    except Exception as exc:
        raise PhaseError(f"parallel merge/probe failed: {exc}") from exc
    if cfg.csr > 0:
        plan = ConsolidationPlan(cfg.csr, cfg.batch_size, cfg.consolidation_chunks, lr=cfg.consolidation_lr)
        budget = consolidation_budget(plan, sum(b.n_saved for b in ledger.tasks.values()))
        lora_rank = cfg.lora.rank if cfg.lora.enabled and "consolidation" in cfg.lora.phases else None
        try:
            net = run_consolidation(
                net, buffer, plan, budget, cfg.loss, state=state, optim=cfg.optim, ledger=ledger,
                task=len(stream.tasks), sampler=_sampler(cfg), lora_rank=lora_rank,
                lora_targets=cfg.lora.targets, seed=derive_seed(seed, _CONSOL_SEED, 0),
                val_fn=_val_all(stream, stream.tasks, setting),
            )
        except Exception as exc:
            raise PhaseError(f"consolidation after probe failed: {exc}") from exc
    ev = evaluate(net, stream.tasks, setting, stream.pretrain)
    val = evaluate(net, stream.tasks, setting, stream.pretrain, split="val")
    row = make_row(cfg, seed, len(stream.tasks), "final", ev, ledger, state.dedup_relaxed, val)
    return RunResult([row], row, ledger, {"head_trace": head_trace}, model=net)


def run_seed(cfg: ExperimentConfig, seed: int) -> RunResult:
    stream = generate_stream(cfg.stream, seed)
    try:
        pre = pretrain(cfg)
    except Exception as exc:
        raise PhaseError(f"pretrain failed: {exc}") from exc
    if cfg.setting == "TIL":
        return run_til(cfg, seed, stream, pre)
    if cfg.merge.strategy == "parallel":
        return run_parallel(cfg, seed, stream, pre)
    return run_sequential(cfg, seed, stream, pre)


@dataclass
class ExperimentResult:
    rows: list[dict]
    per_seed: dict[int, RunResult]
    summary: dict
    wall_clock: float


def summary_row(cfg: ExperimentConfig, finals: list[dict]) -> dict:
    cols = metrics_columns(cfg.stream.n_tasks)
    out = {"run_id": cfg.name, "seed": "mean", "task": finals[0]["task"], "phase": "summary"}
    for c in cols[4:]:
        vals = [f[c] for f in finals if f.get(c) is not None and not (isinstance(f[c], float) and math.isnan(f[c]))]
        out[c] = float(np.mean(vals)) if vals else None
    return out


def run_experiment(cfg: ExperimentConfig, seeds: Sequence[int] | None = None) -> ExperimentResult:
    """Run every seed and append a mean-over-seeds summary row."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    start = time.perf_counter()
    per_seed, rows = {}, []
    for s in seeds:
        res = run_seed(cfg, s)
        per_seed[s] = res
        rows.extend(res.rows)
    summ = summary_row(cfg, [per_seed[s].final for s in seeds])
    rows.append(summ)
    return ExperimentResult(rows, per_seed, summ, time.perf_counter() - start)


def final_metric(result: ExperimentResult, key: str = "acc_1T") -> float:
    return float(result.summary[key])


def validation_score(cfg: ExperimentConfig, result: ExperimentResult) -> float:
    s = result.summary
    if cfg.setting == "CPT" and s.get("val_pt") is not None:
        return 0.5 * (s["val_pt"] + s["val_1T"])
    return s["val_1T"]


@dataclass
class SweepResult:
    best: ExperimentConfig
    best_score: float
    grid: list[dict]


def expand_grid(grid: dict[str, Sequence]) -> list[dict]:
    keys = list(grid)
    points = [{}]
    for k in keys:
        values = list(grid[k])
        if not values:
            raise ValueError(f"grid axis {k!r} is empty")
        points = [dict(p, **{k: v}) for p in points for v in values]
    return points


def sweep(cfg: ExperimentConfig, grid: dict[str, Sequence], seeds: Sequence[int] | None = None,
          on_point: Callable[[dict, ExperimentResult], None] | None = None) -> SweepResult:
    """Run every grid point with the same seeds and keep the best by validation.

    Ties go to the earliest grid point.
    """
    records, best, best_score = [], None, -math.inf
    for i, point in enumerate(expand_grid(grid)):
        point_cfg = cfg.replace(**point, name=f"{cfg.name}-g{i:03d}")
        result = run_experiment(point_cfg, seeds)
        score = validation_score(point_cfg, result)
        records.append({"index": i, "point": point, "validation": score,
                        "test_1T": result.summary["acc_1T"], "test_pt": result.summary["acc_pt"],
                        "trp": result.summary["trp"]})
        if on_point is not None:
            on_point(point, result)
        if score > best_score:
            best, best_score = point_cfg, score
    return SweepResult(best, best_score, records)


__all__ = [
    "SweepResult",
    "expand_grid",
    "sweep",
    "CalibrationError",
    "Evaluation",
    "ExperimentResult",
    "PhaseError",
    "Pretrained",
    "RunResult",
    "evaluate",
    "linear_probe",
    "make_row",
    "metrics_columns",
    "pretrain",
    "run_experiment",
    "run_seed",
    "train_task",
    "validation_score",
]
