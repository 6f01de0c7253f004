"""Synthetic tasks, optimizers and training loops for comparing adapters."""

from __future__ import annotations

import hashlib
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import AdaptedLinear, AdapterConfig, check_shapes, forward, init_adapter
from .gradients import GradientSet, LossSpec, gradients, loss_value
from .linalg import RngState, ShapeError, kaiming_uniform

log = logging.getLogger(__name__)

TASK_KINDS = ("target-recovery", "teacher-student-classification")
OPTIMIZER_KINDS = ("sgd", "adam")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "target-recovery"
    d_in: int = 16
    d_out: int = 16
    target_rank: int = 4
    train_size: int = 256
    eval_size: int = 256
    data_seed: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        for name in ("d_in", "d_out", "target_rank", "train_size", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.target_rank > min(self.d_in, self.d_out):
            raise ValueError(f"target_rank {self.target_rank} exceeds min(d_in, d_out)")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be nonnegative, got {self.noise_std}")


@dataclass
class Dataset:
    spec: TaskSpec
    w0: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    # hidden update (target-recovery) or teacher weight (classification)
    hidden: np.ndarray

    @property
    def loss_kind(self) -> str:
        return "mse" if self.spec.kind == "target-recovery" else "softmax-cross-entropy"

    def loss_spec(self, split: str = "train", index=None) -> LossSpec:
        y = self.y_train if split == "train" else self.y_eval
        return LossSpec(self.loss_kind, y if index is None else y[index])

    def weight_loss(self, weight: np.ndarray, split: str = "eval") -> float:
        """Loss of a plain linear layer ``x @ weight`` on one split."""
        x = self.x_train if split == "train" else self.x_eval
        return float(loss_value(self.loss_spec(split), x @ weight))


def make_task(spec: TaskSpec, rng: RngState | None = None) -> Dataset:
    """Generate a synthetic dataset.

    Draw order from ``rng`` (default ``RngState(spec.data_seed)``): base weight,
    hidden factors or teacher, train inputs, eval inputs, train noise. Inputs are
    uniform on ``[-1, 1]``. For target-recovery the labels are
    ``x @ (w0 + U @ V)`` plus Gaussian noise on the train split only, so the
    eval loss measures recovery of ``U @ V`` directly. For classification the
    labels are the argmax of ``x @ teacher`` (noise perturbs the teacher logits).
    """
    rng = rng or RngState(spec.data_seed)
    d_in, d_out = spec.d_in, spec.d_out
    w0 = kaiming_uniform(d_in, d_out, rng)
    if spec.kind == "target-recovery":
        u = kaiming_uniform(d_in, spec.target_rank, rng)
        v = kaiming_uniform(spec.target_rank, d_out, rng)
        hidden = u @ v
    else:
        hidden = kaiming_uniform(d_in, d_out, rng)
    x_train = rng.uniform(spec.train_size * d_in, -1.0, 1.0).reshape(spec.train_size, d_in)
    x_eval = rng.uniform(spec.eval_size * d_in, -1.0, 1.0).reshape(spec.eval_size, d_in)
    noise = rng.normal(spec.train_size * d_out).reshape(spec.train_size, d_out) * spec.noise_std
    if spec.kind == "target-recovery":
        full = w0 + hidden
        y_train = x_train @ full + noise
        y_eval = x_eval @ full
    else:
        y_train = np.argmax(x_train @ hidden + noise, axis=1)
        y_eval = np.argmax(x_eval @ hidden, axis=1)
    return Dataset(spec, w0, x_train, y_train, x_eval, y_eval, hidden)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 200
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be nonnegative, got {self.learning_rate}")
        for name in ("momentum", "beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def _check_grads(params: dict, grads: dict) -> None:
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient groups {list(grads)} do not match parameters {list(params)}")
    for name, p in params.items():
        if p.shape != grads[name].shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, parameter has {p.shape}")


def sgd_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig) -> tuple[dict, dict]:
    """Heavy-ball SGD: ``v = momentum * v + g``, ``p -= lr * v``."""
    _check_grads(params, grads)
    velocity = state.get("velocity", {})
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        v = grads[name] if name not in velocity else cfg.momentum * velocity[name] + grads[name]
        new_velocity[name] = v
        new_params[name] = p - cfg.learning_rate * v
    return new_params, {"velocity": new_velocity}


def adam_step(params: dict, grads: dict, state: dict, cfg: OptimizerConfig) -> tuple[dict, dict]:
    _check_grads(params, grads)
    t = state.get("t", 0) + 1
    m_prev, v_prev = state.get("m", {}), state.get("v", {})
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = cfg.beta1 * m_prev.get(name, 0.0) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v_prev.get(name, 0.0) + (1.0 - cfg.beta2) * (g * g)
        m_new[name], v_new[name] = m, v
        new_params[name] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    return new_params, {"t": t, "m": m_new, "v": v_new}


STEP_FUNCTIONS = {"sgd": sgd_step, "adam": adam_step}


@dataclass
class TrainRecord:
    epoch: int
    step: int
    train_loss: float
    eval_loss: float
    grad_norm_per_group: dict[str, float]
    wall_time_s: float
    diverged: bool = False
    # sha256 prefix of the epoch's example order; empty for the epoch-0 record
    batch_hash: str = ""


def _evaluate(ad: AdaptedLinear, data: Dataset) -> tuple[float, float, GradientSet]:
    train_loss, grads = gradients(ad, data.x_train, data.loss_spec("train"))
    eval_loss = float(loss_value(data.loss_spec("eval"), forward(ad, data.x_eval)))
    return train_loss, eval_loss, grads


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


def train(ad: AdaptedLinear, task: Dataset, opt: OptimizerConfig, seed: int = 0) -> list[TrainRecord]:
    """Train ``ad`` in place; one record before training and one per epoch.

    Losses and gradient norms in each record are measured on the full splits
    after the epoch's last step. Example order per epoch comes from a stream
    derived from ``seed`` alone, so different adapters trained with the same
    seed see identical batches. A non-finite loss ends the run with a record
    flagged ``diverged``.
    """
    check_shapes(ad)
    if (ad.config.d_in, ad.config.d_out) != (task.spec.d_in, task.spec.d_out):
        raise ShapeError(
            f"adapter is {ad.config.d_in}x{ad.config.d_out}, task is {task.spec.d_in}x{task.spec.d_out}"
        )
    # overflow is detected and reported as divergence below
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(ad, task, opt, seed)


def _train(ad: AdaptedLinear, task: Dataset, opt: OptimizerConfig, seed: int) -> list[TrainRecord]:
    step_fn = STEP_FUNCTIONS[opt.kind]
    order_rng = RngState(seed).derive(1)
    n = task.x_train.shape[0]
    start = time.perf_counter()

    train_loss, eval_loss, grads = _evaluate(ad, task)
    records = [TrainRecord(0, 0, train_loss, eval_loss, grads.norms(), time.perf_counter() - start,
                           diverged=not _finite(train_loss, eval_loss))]
    if records[-1].diverged:
        return records

    params, state = ad.params(), {}
    step = 0
    for epoch in range(1, opt.epochs + 1):
        perm = order_rng.permutation(n)
        batch_hash = hashlib.sha256(perm.astype("<i8").tobytes()).hexdigest()[:16]
        for lo in range(0, n, opt.batch_size):
            idx = perm[lo:lo + opt.batch_size]
            batch_loss, g = gradients(ad, task.x_train[idx], task.loss_spec("train", idx))
            if not _finite(batch_loss):
                log.warning("non-finite batch loss at epoch %d step %d", epoch, step)
                records.append(TrainRecord(epoch, step, batch_loss, math.nan, {}, time.perf_counter() - start,
                                           diverged=True, batch_hash=batch_hash))
                return records
            params, state = step_fn(params, g.groups(), state, opt)
            _load_params(ad, params)
            step += 1
        train_loss, eval_loss, grads = _evaluate(ad, task)
        diverged = not _finite(train_loss, eval_loss)
        records.append(TrainRecord(epoch, step, train_loss, eval_loss, grads.norms(),
                                   time.perf_counter() - start, diverged=diverged, batch_hash=batch_hash))
        if diverged:
            log.warning("non-finite loss after epoch %d", epoch)
            break
    return records


def _load_params(ad: AdaptedLinear, params: dict) -> None:
    ad.a = params["A"]
    ad.chain = [params[f"W{i}"] for i in range(1, len(ad.chain) + 1)]
    ad.b = params["B"]


def area_under_curve(losses) -> float:
    """Trapezoid area under a per-epoch loss curve (unit spacing)."""
    y = np.asarray(losses, dtype=np.float64)
    if y.size < 2:
        return 0.0
    return float(np.sum((y[1:] + y[:-1]) * 0.5))


@dataclass
class CellResult:
    index: int
    label: str
    method: str
    seed: int
    final_eval_loss: float = math.nan
    auc: float = math.nan
    epochs_to_threshold: int | None = None
    diverged: bool = False
    error: str = ""
    records: list[TrainRecord] = field(default_factory=list, repr=False)

    @property
    def batch_hashes(self) -> list[str]:
        return [r.batch_hash for r in self.records[1:]]


@dataclass
class ComparisonReport:
    threshold: float
    cells: list[CellResult]
    aggregates: list[dict]

    def aggregate(self, label_or_method: str) -> dict:
        for agg in self.aggregates:
            if label_or_method in (agg["label"], agg["method"]):
                return agg
        raise KeyError(label_or_method)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "aggregates": self.aggregates,
            "cells": [
                {
                    "index": c.index,
                    "label": c.label,
                    "method": c.method,
                    "seed": c.seed,
                    "final_eval_loss": c.final_eval_loss,
                    "auc": c.auc,
                    "epochs_to_threshold": c.epochs_to_threshold,
                    "diverged": c.diverged,
                    "error": c.error,
                }
                for c in self.cells
            ],
        }


def _run_cell(args) -> CellResult:
    index, config, data, opt, seed = args
    cell = CellResult(index, config.label, config.method, seed)
    try:
        ad = init_adapter(replace(config, seed=seed), data.w0)
        cell.records = train(ad, data, opt, seed)
    except Exception as exc:  # one bad cell must not sink the sweep
        log.exception("cell %s seed %s failed", config.label, seed)
        cell.error = f"{type(exc).__name__}: {exc}"
        return cell
    last = cell.records[-1]
    cell.diverged = last.diverged
    cell.final_eval_loss = last.eval_loss
    cell.auc = area_under_curve([r.eval_loss for r in cell.records])
    return cell


def _mean_sd(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


def compare_methods(
    configs: list[AdapterConfig],
    task: TaskSpec,
    opt: OptimizerConfig,
    seeds: list[int],
    threshold: float | None = None,
    workers: int = 1,
) -> ComparisonReport:
    """Train every (config, seed) cell on one shared dataset and summarize.

    Each cell initializes its adapter from the run seed (so ``A`` is drawn
    identically across methods) and uses the same per-seed batch order.
    ``threshold`` defaults to 1.05 times the best final eval loss over all cells.
    """
    dims = {(c.d_in, c.d_out) for c in configs}
    if dims != {(task.d_in, task.d_out)}:
        raise ShapeError(f"adapter dims {sorted(dims)} do not all match task {task.d_in}x{task.d_out}")
    data = make_task(task)
    jobs = [(i, c, data, opt, s) for i, c in enumerate(configs) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]
    cells.sort(key=lambda c: (c.index, seeds.index(c.seed)))

    finals = [c.final_eval_loss for c in cells if not c.error and not c.diverged]
    if threshold is None:
        threshold = 1.05 * min(finals) if finals else math.nan
    for c in cells:
        for r in c.records:
            if r.eval_loss < threshold:
                c.epochs_to_threshold = r.epoch
                break

    aggregates = []
    for i, config in enumerate(configs):
        mine = [c for c in cells if c.index == i and not c.error and not c.diverged]
        final_mean, final_sd = _mean_sd([c.final_eval_loss for c in mine])
        auc_mean, auc_sd = _mean_sd([c.auc for c in mine])
        reached = [c.epochs_to_threshold for c in mine if c.epochs_to_threshold is not None]
        ett_mean, ett_sd = _mean_sd([float(e) for e in reached])
        aggregates.append({
            "index": i,
            "label": config.label,
            "method": config.method,
            "runs": len(mine),
            "failed": sum(1 for c in cells if c.index == i) - len(mine),
            "final_eval_loss_mean": final_mean,
            "final_eval_loss_sd": final_sd,
            "auc_mean": auc_mean,
            "auc_sd": auc_sd,
            "epochs_to_threshold_mean": ett_mean,
            "epochs_to_threshold_sd": ett_sd,
            "reached_threshold": len(reached),
        })
    return ComparisonReport(threshold=threshold, cells=cells, aggregates=aggregates)
