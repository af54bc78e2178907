"""Deterministic multi-task training loop."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .adapter import seeded_rng
from .grad import AdamState, adam_step

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


class FrozenWeightsModified(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-6
    warmup_ratio: float = 0.05
    lam: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    step_reg: list[float] = field(default_factory=list)
    initial_reg: float = 0.0
    total_steps: int = 0

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "step_losses": self.step_losses,
            "step_reg": self.step_reg,
            "initial_reg": self.initial_reg,
            "total_steps": self.total_steps,
        }


def frozen_digest(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.frozen_params().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def steps_per_epoch(data, batch_size: int) -> int:
    return max(math.ceil(data.n_samples(t) / batch_size) for t in range(data.n_tasks))


def make_optimizer(cfg: TrainConfig, total_steps: int) -> AdamState:
    return AdamState(lr=cfg.lr, total_steps=total_steps, warmup_ratio=cfg.warmup_ratio,
                     weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.eps)


def train(model, data, cfg: TrainConfig, state: AdamState | None = None) -> tuple[History, AdamState]:
    """Train ``model`` in place on ``data``.

    Each step draws one mini-batch per task from that task's seeded
    permutation; tasks with fewer samples wrap around. The frozen weights are
    audited bit-for-bit after the run.
    """
    if cfg.epochs < 0 or cfg.batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if data.n_tasks != model.n_tasks:
        raise ValueError(f"data has {data.n_tasks} tasks, model has {model.n_tasks}")
    spe = steps_per_epoch(data, cfg.batch_size)
    total = cfg.epochs * spe
    state = state or make_optimizer(cfg, total)
    history = History(initial_reg=float(model.regularizer()), total_steps=total)
    before = frozen_digest(model)
    if total == 0:
        return history, state
    params = model.trainable_params()
    order_rng = seeded_rng(cfg.seed)
    drop_rng = seeded_rng(cfg.seed + 1)
    step = 0
    for epoch in range(cfg.epochs):
        perms = [order_rng.permutation(data.n_samples(t)) for t in range(data.n_tasks)]
        sums = np.zeros(model.n_tasks)
        reg_sum = total_sum = 0.0
        for s in range(spe):
            idx = []
            for t, perm in enumerate(perms):
                pos = (np.arange(cfg.batch_size) + s * cfg.batch_size) % len(perm)
                idx.append(perm[pos])
            losses, reg, tot, grads = model.loss_and_grads(
                data.batch(idx), lam=cfg.lam, mode="train", rng=drop_rng)
            step += 1
            if not np.isfinite(tot):
                raise TrainingDiverged(step, tot)
            adam_step(params, grads, state)
            sums += losses
            reg_sum += reg
            total_sum += tot
            history.step_losses.append(float(tot))
            history.step_reg.append(float(reg))
        rec = {
            "epoch": epoch,
            "task_losses": [float(x) for x in sums / spe],
            "reg": reg_sum / spe,
            "total": total_sum / spe,
        }
        history.epochs.append(rec)
        logger.debug("epoch %d total %.6g reg %.6g", epoch, rec["total"], rec["reg"])
    if frozen_digest(model) != before:
        raise FrozenWeightsModified("frozen weights changed during training")
    return history, state


def evaluate(model, data) -> list[float]:
    """Per-task losses on the full dataset in eval mode."""
    losses, _, _, _ = model.loss_and_grads(data.full_batch(), lam=0.0, mode="eval",
                                           need_grads=False)
    return [float(x) for x in losses]
