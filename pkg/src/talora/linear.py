"""Multi-task linear regression through a single adapted matrix."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from .adapter import (
    AdaptedLinear,
    AdapterSpec,
    LoraPerTask,
    TuckerFactors,
    adapted_forward,
    array_caster,
    make_adapter,
    recast,
)
from .grad import backward_adapted_linear, backward_lora, backward_tucker_slices
from .objective import (
    TaskSpec,
    orthogonality_gradients,
    orthogonality_penalty,
    task_loss_and_grad,
    task_weights,
)


class LinearTaskModel:
    """``y = (W0 + delta_t) x`` for each task ``t``, trained with its task loss.

    Trainable parameters are the adapter's, named as in
    :meth:`AdaptedLinear.named_params` (``G, U1, U2, U3`` or ``B.{t}, A.{t}``
    or ``B, A``).
    """

    def __init__(self, W0, tasks: Sequence[TaskSpec], adapter: AdapterSpec, seed: int = 0):
        if not tasks:
            raise ValueError("at least one task is required")
        self.tasks = list(tasks)
        self.adapter_spec = adapter
        W0 = np.asarray(W0, dtype=np.float64)
        d, k = W0.shape
        self.layer = AdaptedLinear(W0, make_adapter(adapter, d, k, len(tasks), seed),
                                   dropout_rate=adapter.dropout)
        self._collect()

    def _collect(self):
        self.params = dict(self.layer.named_params())
        self.frozen = {"W0": self.layer.W0}

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def trainable_params(self) -> dict[str, np.ndarray]:
        return self.params

    def frozen_params(self) -> dict[str, np.ndarray]:
        return self.frozen

    def adapters(self):
        yield "linear", self.layer.adapter

    def adapter_param_count(self) -> int:
        d, k = self.layer.shape
        return self.adapter_spec.count(d, k, self.n_tasks)

    def astype(self, dtype) -> "LinearTaskModel":
        clone = copy.deepcopy(self)
        cast = array_caster(dtype)
        clone.layer.W0 = cast(clone.layer.W0)
        recast(clone.layer.adapter, cast)
        clone._collect()
        return clone

    def regularizer(self) -> float:
        if self.adapter_spec.kind != "ta_lora":
            return 0.0
        return orthogonality_penalty(self.layer.adapter, self.adapter_spec.ortho_core)

    def predict(self, X, t: int) -> np.ndarray:
        return adapted_forward(self.layer, X, t, "eval")[0]

    def loss_and_grads(self, batch, lam: float = 0.0, mode: str = "train", rng=None,
                       need_grads: bool = True):
        weights = task_weights(self.tasks)
        losses = []
        slice_grads = {}
        for spec in self.tasks:
            t = spec.id
            X, Y = batch[t]
            delta = self.layer.delta(t)
            H, mask = adapted_forward(self.layer, X, t, mode, rng, delta=delta)
            loss, dH = task_loss_and_grad(spec.loss_kind, H, Y)
            losses.append(loss)
            if not np.isfinite(loss):
                # the caller reports divergence; there is nothing to backpropagate
                need_grads = False
            if need_grads:
                slice_grads[t], _ = backward_adapted_linear(
                    self.layer, X, t, dH * weights[t], mask=mask, delta=delta)
        reg = self.regularizer()
        total = sum(w * L for w, L in zip(weights, losses)) + lam * reg
        grads = None
        if need_grads:
            adapter = self.layer.adapter
            if isinstance(adapter, TuckerFactors):
                grads = backward_tucker_slices(slice_grads, adapter)
                if lam:
                    og = orthogonality_gradients(adapter, self.adapter_spec.ortho_core)
                    grads = {n: g + lam * og[n] for n, g in grads.items()}
            elif isinstance(adapter, LoraPerTask):
                grads = {}
                for t, pair in enumerate(adapter.pairs):
                    g = backward_lora(slice_grads[t], pair)
                    grads[f"B.{t}"], grads[f"A.{t}"] = g["B"], g["A"]
            else:
                dd = sum(slice_grads[t] for t in sorted(slice_grads))
                grads = backward_lora(dd, adapter.pair)
        return losses, reg, total, grads
