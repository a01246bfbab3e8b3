"""Multi-task training: joint loss, Adam, and the fit loop."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffgraph as dg
from .diffgraph import Tensor
from .errors import ConfigError, NumericsError, TrainingDivergenceError
from .evaluation import auc, predict_dataset
from .model import (EncodedBatch, ModelConfig, Task, TASKS, encode_examples,
                    mvke_forward, two_tower_forward)

MODES = ("ctr-only", "cvr-only", "multi")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    mode: str = "multi"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # 0 is allowed as an explicit no-update dry run
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must not be negative")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "epochs", "batch_size", "learning_rate", "beta1", "beta2", "eps",
            "seed", "mode")}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def mode_tasks(mode: str) -> tuple[Task, ...]:
    if mode == "ctr-only":
        return (Task.CTR,)
    if mode == "cvr-only":
        return (Task.CVR,)
    return TASKS


def mtl_loss(batch: EncodedBatch, cfg: ModelConfig, params: dict[str, Tensor],
             mode: str = "multi") -> Tensor:
    """Joint loss: unweighted sum of the per-task BCE losses.

    Both tasks consume every impression in the batch with their own label;
    single-task modes return that task's BCE alone.
    """
    tasks = mode_tasks(mode)
    if mode == "multi":
        cfg.routing.check_multi_task()
    out = mvke_forward(batch, cfg, params, tasks)
    total = None
    for task in tasks:
        term = dg.bce_loss(out[task][0], batch.label(task))
        total = term if total is None else dg.add(total, term)
    return total


def two_tower_loss(batch: EncodedBatch, cfg: ModelConfig,
                   params: dict[str, Tensor], task: Task) -> Tensor:
    p = two_tower_forward(batch, cfg, params, task)
    return dg.bce_loss(p, batch.label(task))


class Adam:
    """Standard Adam with bias correction; zeroes grads after each step."""

    def __init__(self, params: dict[str, Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.first_moment = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.second_moment = {n: np.zeros_like(t.data) for n, t in params.items()}

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, tensor in params.items():
            grad = tensor.grad
            if grad is None:
                continue
            if not np.all(np.isfinite(grad)):
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1 - b1) * grad
            v *= b2
            v += (1 - b2) * grad * grad
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            tensor.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            if not np.all(np.isfinite(tensor.data)):
                raise NumericsError(f"parameter {name!r} became non-finite")
            tensor.zero_grad()


def _model_loss(model, batch: EncodedBatch, mode: str) -> Tensor:
    if model.kind == "mvke":
        return mtl_loss(batch, model.cfg, model.params, mode)
    return two_tower_loss(batch, model.cfg, model.params, model.task)


def _fit_tasks(model, mode: str) -> tuple[Task, ...]:
    if model.kind == "mvke":
        return mode_tasks(mode)
    return (model.task,)


def _validation_aucs(model, batch: EncodedBatch, tasks) -> dict[Task, float]:
    return {task: auc(predict_dataset(model, batch, task), batch.label(task))
            for task in tasks}


def snapshot_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {name: dg.raw_tensor(t.data.copy(), t.requires_grad)
            for name, t in params.items()}


def fit(model, train_ds: Sequence, valid_ds: Sequence,
        cfg: TrainConfig) -> tuple[dict[str, Tensor], list[dict]]:
    """Train in shuffled mini-batches, keep the best validation checkpoint.

    Returns (best params, history rows). The model is left holding the
    best parameters; selection is by mean validation AUC over the trained
    tasks, earliest epoch winning ties. Aborts with epoch and batch index
    if the loss goes non-finite.
    """
    tasks = _fit_tasks(model, cfg.mode)
    train_batch = encode_examples(train_ds, model.cfg.schema)
    valid_batch = encode_examples(valid_ds, model.cfg.schema)
    optimizer = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    best_params = snapshot_params(model.params)
    best_score = -1.0
    history: list[dict] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train_batch.size)
        loss_sum, seen = 0.0, 0
        for b, start in enumerate(range(0, train_batch.size, cfg.batch_size)):
            rows = perm[start:start + cfg.batch_size]
            batch = train_batch.slice(rows)
            try:
                loss = _model_loss(model, batch, cfg.mode)
                dg.zero_grads(model.params)
                dg.backward(loss)
                optimizer.step(model.params)
            except NumericsError as e:
                raise TrainingDivergenceError(epoch, b, str(e)) from e
            loss_sum += loss.item() * len(rows)
            seen += len(rows)
        val = _validation_aucs(model, valid_batch, tasks)
        row = {"epoch": epoch,
               "train_loss": loss_sum / seen,
               "ctr_auc": val.get(Task.CTR),
               "cvr_auc": val.get(Task.CVR)}
        history.append(row)
        score = sum(val.values()) / len(val)
        if score > best_score:
            best_score = score
            best_params = snapshot_params(model.params)
    model.params = best_params
    return best_params, history


def history_rows_for_csv(history: list[dict]) -> list[dict]:
    return [{"epoch": h["epoch"], "train_loss": h["train_loss"],
             "ctr_auc": h["ctr_auc"], "cvr_auc": h["cvr_auc"]} for h in history]
