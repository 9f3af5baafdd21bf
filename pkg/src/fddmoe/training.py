"""Adam, multi-task pretraining, frozen-trunk fine-tuning and the STL/CEP/DSC trainers."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import diffcore as dc
from .channels import ChannelDataset, TaskConfig
from .diffcore import ComplexMatrix, Tensor
from .endtoend import (ModelBundle, ModelConfig, _as_channel, estimate_channels, forward_end_to_end,
                       pilot_forward)
from .objectives import mtl_weights, task_loss

log = logging.getLogger(__name__)

MODES = ("mtl", "stl", "cep", "dsc", "finetune")


@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: OptimizerState,
              grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place.

    L2 regularization adds ``weight_decay * theta`` to each gradient. Parameters
    without ``requires_grad`` or without a gradient are left untouched.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise dc.ShapeError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if state.weight_decay:
            g = g + p.dtype.type(state.weight_decay) * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


@dataclass
class TrainPlan:
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    mode: str = "mtl"
    weights: dict | None = None
    weighting: str = "uniform"
    batches_per_epoch: int | None = None
    step_per: str = "batch"
    freeze: tuple[str, ...] = ()
    est_epochs: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if self.step_per not in ("batch", "epoch"):
            raise ValueError("step_per must be 'batch' or 'epoch'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.freeze = tuple(self.freeze)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)


def new_optimizer(plan: TrainPlan) -> OptimizerState:
    return OptimizerState(lr=plan.lr, weight_decay=plan.weight_decay)


def _trainable(named: Mapping[str, Tensor], freeze) -> dict[str, Tensor]:
    return {n: t for n, t in named.items()
            if t.requires_grad and not any(n.startswith(f) for f in freeze)}


def _batches(n: int, M: int) -> int:
    return max(1, n // M)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, 0xE90C, epoch])


def _run_epochs(datasets: Mapping[str, ChannelDataset], params: dict[str, Tensor],
                loss_fn: Callable, plan: TrainPlan, weights: Mapping[str, float],
                opt: OptimizerState, start_epoch: int, history: list, callback=None,
                rate_sign: float = -1.0) -> None:
    """Shared loop: round-robin over tasks, one joint backward per round."""
    tids = list(datasets)
    M = plan.batch_size
    for epoch in range(start_epoch, plan.epochs):
        rng = _epoch_rng(plan.seed, epoch)
        perms = {t: rng.permutation(len(datasets[t])) for t in tids}
        nb = {t: _batches(len(datasets[t]), M) for t in tids}
        rounds = plan.batches_per_epoch or max(nb.values())
        sums = {t: 0.0 for t in tids}
        for r in range(rounds):
            total = None
            for t in tids:
                j = r % nb[t]
                idx = perms[t][j * M:(j + 1) * M]
                loss = loss_fn(t, datasets[t].samples[idx], rng)
                sums[t] += float(loss.data)
                term = dc.scale(loss, weights[t])
                total = term if total is None else total + term
            total.backward()
            if plan.step_per == "batch":
                adam_step(params, opt)
                for p in params.values():
                    p.grad = None
        if plan.step_per == "epoch":
            for p in params.values():
                if p.grad is not None:
                    p.grad = p.grad / rounds
            adam_step(params, opt)
            for p in params.values():
                p.grad = None
        agg = 0.0
        for t in tids:
            mean_loss = sums[t] / rounds
            agg += weights[t] * mean_loss
            history.append({"epoch": epoch + 1, "task_id": t, "loss": mean_loss,
                            "sum_rate": rate_sign * mean_loss if rate_sign else float("nan")})
        if len(tids) > 1:
            history.append({"epoch": epoch + 1, "task_id": "all", "loss": agg, "sum_rate": float("nan")})
        log.debug("epoch %d loss %.5f", epoch + 1, agg)
        if callback is not None:
            callback(epoch + 1)


def _sumrate_loss(bundle: ModelBundle):
    def fn(task_id, H, rng):
        cfg = bundle.task(task_id).config
        V = forward_end_to_end(H, bundle, task_id, "train", rng)
        return task_loss(_as_channel(H, bundle.dtype), V, cfg.sigma2)
    return fn


def pretrain_mtl(datasets: Mapping[str, ChannelDataset], bundle: ModelBundle, plan: TrainPlan,
                 opt: OptimizerState | None = None, start_epoch: int = 0, history: list | None = None,
                 callback=None):
    """Joint training of the trunk and every task head on the weighted sum of task losses.

    Returns ``(bundle, history, optimizer_state)``; ``bundle`` is updated in place.
    """
    if not datasets:
        raise ValueError("no tasks to train")
    for t, ds in datasets.items():
        bundle.task(t)
        if len(ds) == 0:
            raise ValueError(f"dataset for task {t!r} is empty")
    weights = plan.weights or mtl_weights({t: len(ds) for t, ds in datasets.items()}, plan.weighting)
    named = bundle.trunk_parameters()
    for t in datasets:
        named.update(bundle.task_parameters(t))
    params = _trainable(named, plan.freeze)
    opt = opt or new_optimizer(plan)
    history = [] if history is None else history
    _run_epochs(datasets, params, _sumrate_loss(bundle), plan, weights, opt, start_epoch, history, callback)
    return bundle, history, opt


def train_stl(cfg: TaskConfig, train: ChannelDataset, plan: TrainPlan, arch: ModelConfig,
              dtype=None, **kw):
    """Independent model (private trunk) for a single task."""
    bundle = ModelBundle.create(arch, [cfg], seed=plan.seed, dtype=dtype)
    return pretrain_mtl({cfg.task_id: train}, bundle, plan, **kw)


def train_dsc(cfg: TaskConfig, train: ChannelDataset, plan: TrainPlan, arch: ModelConfig,
              dtype=None, **kw):
    """Pilots + shared user encoder + plain MLP decoder, single configuration."""
    bundle = ModelBundle.create(arch, [cfg], seed=plan.seed, kind="dsc", dtype=dtype)
    return pretrain_mtl({cfg.task_id: train}, bundle, plan, **kw)


def finetune(bundle: ModelBundle, cfg: TaskConfig, train: ChannelDataset, plan: TrainPlan,
             dtype=None, **kw):
    """Adds a fresh head for an unseen task and trains only that head; the trunk stays frozen."""
    if not bundle.trunk:
        raise ValueError("fine-tuning needs a model with a trunk")
    if cfg.task_id in bundle.tasks:
        raise ValueError(f"task id {cfg.task_id!r} collides with a registered task")
    bundle.add_task(cfg, seed=plan.seed, dtype=dtype)
    prev = {n: t.requires_grad for n, t in bundle.trunk.items()}
    bundle.freeze_trunk(True)
    try:
        return pretrain_mtl({cfg.task_id: train}, bundle, plan, **kw)
    finally:
        for n, t in bundle.trunk.items():
            t.requires_grad = prev[n]


def channel_rows(H: np.ndarray) -> np.ndarray:
    """``[re; im]`` of every channel row, shape (..., K, 2 n_tx)."""
    return np.concatenate([H.real, H.imag], axis=-1)


def cep_estimation_loss(bundle: ModelBundle, task_id: str, H: np.ndarray, rng) -> Tensor:
    head = bundle.task(task_id)
    cfg = head.config
    Y = pilot_forward(_as_channel(H, bundle.dtype), head.params["pilot"], cfg.sigma2,
                      cfg.pilot_symbol_energy, rng=rng)
    err = estimate_channels(Y, head.params) - channel_rows(H).astype(bundle.dtype)
    return (err * err).sum(axis=-1).mean()


def cep_nmse(bundle: ModelBundle, task_id: str, ds: ChannelDataset, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    with dc.no_grad():
        mse = float(cep_estimation_loss(bundle, task_id, ds.samples, rng).data)
    return mse / float(np.mean(np.sum(np.abs(ds.samples) ** 2, axis=-1)))


def train_cep(cfg: TaskConfig, train: ChannelDataset, plan: TrainPlan, arch: ModelConfig,
              dtype=None, bundle: ModelBundle | None = None):
    """Two stages: MMSE channel estimator (with pilots), then a sum-rate precoder on the estimates.

    The estimates reach the BS without quantization. Stage-1 parameters are frozen in stage 2.
    Returns ``(bundle, history)``.
    """
    bundle = bundle or ModelBundle.create(arch, [cfg], seed=plan.seed, kind="cep", dtype=dtype)
    tid = cfg.task_id
    head = bundle.task(tid)
    stage1 = [f"task.{tid}.pilot"] + [f"task.{tid}.{k}" for k in head.params if k.startswith("est.")]
    named = bundle.named_parameters()
    history: list = []
    p1 = _trainable({n: named[n] for n in stage1}, plan.freeze)
    est_plan = replace(plan, epochs=plan.est_epochs)
    _run_epochs({tid: train}, p1, lambda t, H, rng: cep_estimation_loss(bundle, t, H, rng),
                est_plan, {tid: 1.0}, new_optimizer(plan), 0, history, rate_sign=0.0)
    for row in history:
        row["task_id"] = f"{tid}:estimator"
    for n in stage1:
        named[n].requires_grad = False
        named[n].grad = None
    p2 = _trainable({n: t for n, t in named.items() if n not in stage1}, plan.freeze)
    h2: list = []
    _run_epochs({tid: train}, p2, _sumrate_loss(bundle), plan, {tid: 1.0}, new_optimizer(plan), 0, h2)
    for row in h2:
        row["epoch"] += plan.est_epochs
    return bundle, history + h2


def train(mode: str, configs, datasets: Mapping[str, ChannelDataset], plan: TrainPlan,
          arch: ModelConfig, dtype=None):
    """Dispatch on training mode; returns ``(bundle, history)``."""
    configs = list(configs)
    if mode == "mtl":
        bundle = ModelBundle.create(arch, configs, seed=plan.seed, dtype=dtype)
        bundle, hist, _ = pretrain_mtl({c.task_id: datasets[c.task_id] for c in configs}, bundle, plan)
        return bundle, hist
    if len(configs) != 1:
        raise ValueError(f"mode {mode!r} trains a single task, got {len(configs)}")
    cfg = configs[0]
    if mode == "stl":
        bundle, hist, _ = train_stl(cfg, datasets[cfg.task_id], plan, arch, dtype)
    elif mode == "dsc":
        bundle, hist, _ = train_dsc(cfg, datasets[cfg.task_id], plan, arch, dtype)
    elif mode == "cep":
        bundle, hist = train_cep(cfg, datasets[cfg.task_id], plan, arch, dtype)
    else:
        raise ValueError(f"mode {mode!r} is not a from-scratch training mode")
    return bundle, hist


HISTORY_FIELDS = ("epoch", "task_id", "loss", "sum_rate")


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "task_id": r["task_id"], "loss": float(r["loss"]),
                 "sum_rate": float(r["sum_rate"])} for r in csv.DictReader(fh)]
