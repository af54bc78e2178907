"""scikit-learn style multi-task regressor built on the adapted linear model.

The estimator fits a frozen shared weight by pooled least squares, then learns
one adapter update per task::

    est = TaskAwareLoRARegressor(p=4, q=4, v=2, epochs=100)
    est.fit(X, y, tasks=task_ids)
    est.predict(X_new, tasks=new_ids)

Task labels may be any hashable values; they are mapped to ``0..T-1`` in
sorted order and kept in ``tasks_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, column_or_1d

from .adapter import AdapterSpec, merge
from .linear import LinearTaskModel
from .objective import TaskSpec
from .synth import SynthTaskData
from .trainer import TrainConfig, train

__all__ = ["TaskAwareLoRARegressor"]


def _check_tasks(tasks, n: int) -> np.ndarray:
    if tasks is None:
        raise ValueError("tasks is required: one task label per row of X")
    tasks = column_or_1d(tasks, warn=True)
    if len(tasks) != n:
        raise ValueError(f"tasks has {len(tasks)} entries but X has {n} rows")
    return tasks


class TaskAwareLoRARegressor(RegressorMixin, BaseEstimator):
    """Multi-task linear regression with a Tucker or LoRA adapter per task.

    Parameters
    ----------
    kind : {"ta_lora", "lora_stl", "lora_hps"}
        Adapter family. ``lora_hps`` shares one update across all tasks.
    p, q, v : int
        Tucker ranks for ``ta_lora``.
    r : int
        LoRA rank for the other kinds.
    lam : float
        Weight of the orthogonality regularizer (``ta_lora`` only).
    base_alpha : float
        Ridge penalty for the pooled least-squares base weight.
    """

    def __init__(self, kind="ta_lora", p=4, q=4, v=2, r=4, lam=0.0, ortho_core=True,
                 dropout=0.0, epochs=100, batch_size=16, lr=1e-2, weight_decay=1e-6,
                 warmup_ratio=0.05, base_alpha=1e-6, random_state=0):
        self.kind = kind
        self.p = p
        self.q = q
        self.v = v
        self.r = r
        self.lam = lam
        self.ortho_core = ortho_core
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.base_alpha = base_alpha
        self.random_state = random_state

    def _base_weight(self, X, Y):
        k = X.shape[1]
        A = X.T @ X + self.base_alpha * np.eye(k)
        return np.linalg.solve(A, X.T @ Y).T

    def fit(self, X, y, tasks=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        tasks = _check_tasks(tasks, X.shape[0])
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1)
        self.tasks_, idx = np.unique(tasks, return_inverse=True)
        self.n_tasks_ = len(self.tasks_)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)

        spec = AdapterSpec(self.kind, self.p, self.q, self.v, self.r, self.dropout,
                           self.ortho_core)
        self.W0_ = self._base_weight(X, Y)
        specs = [TaskSpec(t, "mse") for t in range(self.n_tasks_)]
        self.model_ = LinearTaskModel(self.W0_, specs, spec, seed=seed)
        data = SynthTaskData("user", seed, 0.0,
                             [X[idx == t] for t in range(self.n_tasks_)],
                             [Y[idx == t] for t in range(self.n_tasks_)])
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                          weight_decay=self.weight_decay, warmup_ratio=self.warmup_ratio,
                          lam=self.lam, seed=seed)
        self.history_, _ = train(self.model_, data, cfg)
        return self

    def _task_index(self, tasks) -> np.ndarray:
        pos = np.searchsorted(self.tasks_, tasks)
        pos = np.clip(pos, 0, self.n_tasks_ - 1)
        bad = self.tasks_[pos] != tasks
        if np.any(bad):
            label = np.asarray(tasks)[np.argmax(bad)].item()
            raise ValueError(f"unknown task label {label!r}; "
                             f"fitted tasks are {self.tasks_.tolist()}")
        return pos

    def predict(self, X, tasks=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        idx = self._task_index(_check_tasks(tasks, X.shape[0]))
        out = np.empty((X.shape[0], self.n_outputs_))
        for t in np.unique(idx):
            rows = idx == t
            out[rows] = self.model_.predict(X[rows], int(t))
        return out[:, 0] if self._y_1d else out

    def score(self, X, y, tasks=None, sample_weight=None):
        return r2_score(y, self.predict(X, tasks), sample_weight=sample_weight)

    def task_weight(self, task) -> np.ndarray:
        """Merged weight ``W0 + delta_t`` for one fitted task label."""
        check_is_fitted(self, "model_")
        t = int(self._task_index(np.asarray([task]))[0])
        return merge(self.model_.layer, t)
