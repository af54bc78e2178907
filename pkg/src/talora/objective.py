"""Task losses, the orthogonality regularizer and the multi-task Delta metric."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import TuckerFactors
from .tensor import real_dtype

logger = logging.getLogger(__name__)

LOSS_KINDS = ("cross_entropy", "l1", "cosine", "mse")
COSINE_EPS = 1e-12


@dataclass(frozen=True)
class TaskSpec:
    """One task: its loss, its weight in the total loss, its output channels."""

    id: int
    loss_kind: str
    weight: float = 1.0
    out_channels: int = 1
    name: str = ""

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if not self.weight > 0:
            raise ValueError(f"task {self.id}: weight must be > 0, got {self.weight}")
        if int(self.out_channels) != self.out_channels or self.out_channels < 1:
            raise ValueError(f"task {self.id}: out_channels must be >= 1, got {self.out_channels}")


# --------------------------------------------------------------------------
# orthogonality regularizer


def _gram_residual(M: np.ndarray) -> np.ndarray:
    return M.T @ M - np.eye(M.shape[1])


def orthogonality_penalty(f: TuckerFactors, include_core: bool = True):
    """``||U1'U1 - I||^2 + ||U2'U2 - I||^2 + sum_l ||G_l'G_l - I||^2``.

    ``G_l`` is the frontal slice ``G[:, :, l]`` of shape ``(p, q)``. With
    ``include_core=False`` the core terms are dropped.
    """
    r = np.sum(_gram_residual(f.U1) ** 2) + np.sum(_gram_residual(f.U2) ** 2)
    if include_core:
        for l in range(f.G.shape[2]):
            r = r + np.sum(_gram_residual(f.G[:, :, l]) ** 2)
    return r


def orthogonality_gradients(f: TuckerFactors, include_core: bool = True) -> dict[str, np.ndarray]:
    """Analytic gradients of :func:`orthogonality_penalty`; ``U3`` gets zeros."""
    grads = {
        "G": np.zeros_like(f.G),
        "U1": 4.0 * f.U1 @ _gram_residual(f.U1),
        "U2": 4.0 * f.U2 @ _gram_residual(f.U2),
        "U3": np.zeros_like(f.U3),
    }
    if include_core:
        for l in range(f.G.shape[2]):
            Gl = f.G[:, :, l]
            grads["G"][:, :, l] = 4.0 * Gl @ _gram_residual(Gl)
    return grads


# --------------------------------------------------------------------------
# per-task losses
#
# Predictions have shape (n, C, *spatial) for a batch of n samples with C
# channels; per-sample losses are means over spatial positions, the batch
# loss is the mean over samples. Cross-entropy targets have shape
# (n, *spatial) and hold class indices.


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")


def task_loss(kind: str, pred, target) -> float:
    return task_loss_and_grad(kind, pred, target)[0]


def task_loss_and_grad(kind: str, pred, target) -> tuple[float, np.ndarray]:
    """Loss value and its gradient with respect to ``pred``.

    Values are returned as numpy scalars so extended-precision inputs keep
    their precision.
    """
    pred = np.asarray(pred, dtype=real_dtype(pred))
    if kind == "mse":
        target = np.asarray(target, dtype=pred.dtype)
        _check_shapes(pred, target)
        diff = pred - target
        return np.mean(diff * diff), 2.0 * diff / diff.size
    if kind == "l1":
        target = np.asarray(target, dtype=pred.dtype)
        _check_shapes(pred, target)
        diff = pred - target
        return np.mean(np.abs(diff)), np.sign(diff) / diff.size
    if kind == "cross_entropy":
        target = np.asarray(target)
        if pred.ndim < 2 or pred.shape[:1] + pred.shape[2:] != target.shape:
            raise ValueError(
                f"cross-entropy expects targets of shape {pred.shape[:1] + pred.shape[2:]}, "
                f"got {target.shape}"
            )
        n_classes = pred.shape[1]
        if target.size and (target.min() < 0 or target.max() >= n_classes):
            raise ValueError(f"class index out of range for {n_classes} classes")
        logits = np.moveaxis(pred, 1, -1)  # (n, *spatial, C)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        logp = shifted - logz
        onehot = np.eye(n_classes)[target]
        count = target.size
        loss = -np.sum(logp * onehot) / count
        grad = (np.exp(logp) - onehot) / count
        return loss, np.moveaxis(grad, -1, 1)
    if kind == "cosine":
        target = np.asarray(target, dtype=pred.dtype)
        _check_shapes(pred, target)
        a = np.moveaxis(pred, 1, -1)
        b = np.moveaxis(target, 1, -1)
        na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        nb = np.sqrt(np.sum(b * b, axis=-1, keepdims=True))
        zero_t = nb[..., 0] < COSINE_EPS
        if np.any(zero_t):
            logger.warning("cosine loss: %d zero target vectors scored as 1", int(zero_t.sum()))
        da = np.maximum(na, COSINE_EPS)
        db = np.maximum(nb, COSINE_EPS)
        dot = np.sum(a * b, axis=-1, keepdims=True)
        cos = dot / (da * db)
        count = cos.size
        loss = np.sum(1.0 - cos) / count
        # d cos / d a, treating the eps clamp as inactive where it is
        active = na > COSINE_EPS
        dcos = b / (da * db) - np.where(active, cos * a / (da * da), 0.0)
        grad = -dcos / count
        return loss, np.moveaxis(grad, -1, 1)
    raise ValueError(f"unknown loss kind {kind!r}")


def total_loss(task_losses: Sequence[float], specs: Sequence[TaskSpec], lam: float,
               reg: float) -> float:
    """``(1 / sum w) * sum w_i L_i + lam * R``, reduced in task order."""
    if not specs:
        raise ValueError("total_loss needs at least one task")
    if len(task_losses) != len(specs):
        raise ValueError(f"{len(task_losses)} losses for {len(specs)} tasks")
    wsum = sum(s.weight for s in specs)
    if not wsum > 0:
        raise ValueError("sum of task weights must be positive")
    acc = 0.0
    for L, s in zip(task_losses, specs):
        acc += s.weight * L
    return acc / wsum + lam * reg


def task_weights(specs: Sequence[TaskSpec]) -> list[float]:
    """Multipliers ``w_i / sum w`` applied to each task loss in the total."""
    wsum = sum(s.weight for s in specs)
    return [s.weight / wsum for s in specs]


# --------------------------------------------------------------------------
# Delta metric


@dataclass
class Metric:
    name: str
    value: float
    lower_is_better: bool


@dataclass
class MetricsTable:
    """Per-task metric lists, keyed by task name in insertion order."""

    tasks: dict[str, list[Metric]] = field(default_factory=dict)
    label: str = ""

    def add(self, task: str, name: str, value: float, lower_is_better: bool) -> None:
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"{task}/{name}: metric value must be finite")
        self.tasks.setdefault(task, []).append(Metric(name, value, bool(lower_is_better)))

    def structure(self) -> list[tuple[str, list[tuple[str, bool]]]]:
        return [(t, [(m.name, m.lower_is_better) for m in ms]) for t, ms in self.tasks.items()]

    def to_jsonl(self) -> str:
        lines = []
        for task, metrics in self.tasks.items():
            for m in metrics:
                rec = {"task": task, "metric": m.name, "value": m.value,
                       "lower_is_better": m.lower_is_better}
                lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str, label: str = "") -> "MetricsTable":
        table = cls(label=label)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rec = json.loads(line)
                table.add(rec["task"], rec["metric"], rec["value"], rec["lower_is_better"])
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"line {lineno}: malformed metrics record ({exc})") from None
        if not table.tasks:
            raise ValueError("metrics table is empty")
        return table

    @classmethod
    def load(cls, path) -> "MetricsTable":
        path = Path(path)
        return cls.from_jsonl(path.read_text(), label=path.stem)


def delta_metric(candidate: MetricsTable, baseline: MetricsTable) -> float:
    """Mean over tasks of the mean signed relative change versus ``baseline``.

    Lower-is-better metrics count a decrease as improvement. Returned as a
    fraction, so ``0.1067`` means +10.67 %.
    """
    if candidate.structure() != baseline.structure():
        raise ValueError("candidate and baseline tables have different task/metric structure")
    per_task = []
    for task, base_metrics in baseline.tasks.items():
        terms = []
        for cm, bm in zip(candidate.tasks[task], base_metrics):
            if bm.value == 0.0:
                raise ValueError(f"{task}/{bm.name}: baseline value is zero")
            sign = -1.0 if bm.lower_is_better else 1.0
            terms.append(sign * (cm.value - bm.value) / bm.value)
        per_task.append(sum(terms) / len(terms))
    return sum(per_task) / len(per_task)
