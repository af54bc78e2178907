"""Deterministic synthetic multi-task datasets.

``shared-lowrank-regression``
    ``y = (W0 + DeltaW*[:, :, t]) x + noise`` where the true update tensor has
    an exact Tucker structure with orthonormal ``U1*``, ``U2*`` and core slices,
    so the orthogonality regularizer vanishes at the truth.

``dense-multitask``
    Feature grids derived from a smooth latent field shared by all tasks, with
    per-pixel targets for every task (class maps for cross-entropy, unit
    vectors for cosine, squashed regressions for L1/MSE).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapter import TuckerFactors, reconstruct, seeded_rng
from .objective import TaskSpec

RECIPES = ("shared-lowrank-regression", "dense-multitask")


@dataclass
class SynthTaskData:
    recipe: str
    seed: int
    noise: float
    inputs: list[np.ndarray]
    targets: list[np.ndarray]
    truth: dict = field(default_factory=dict)

    @property
    def n_tasks(self) -> int:
        return len(self.inputs)

    def n_samples(self, t: int) -> int:
        return len(self.inputs[t])

    def batch(self, indices: Sequence[np.ndarray]) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {t: (self.inputs[t][idx], self.targets[t][idx]) for t, idx in enumerate(indices)}

    def full_batch(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {t: (self.inputs[t], self.targets[t]) for t in range(self.n_tasks)}

    def digest(self) -> str:
        h = hashlib.sha256()
        for x, y in zip(self.inputs, self.targets):
            h.update(np.ascontiguousarray(x).tobytes())
            h.update(np.ascontiguousarray(y).tobytes())
        return h.hexdigest()


def _orthonormal_columns(rng, rows, cols):
    Q, R = np.linalg.qr(rng.standard_normal((rows, cols)))
    return Q * np.sign(np.diag(R))


def true_factors(d, k, T, p, q, v, rng) -> TuckerFactors:
    if q > p:
        raise ValueError("orthonormal core slices need q <= p")
    G = np.stack([_orthonormal_columns(rng, p, q) for _ in range(v)], axis=2)
    return TuckerFactors(G, _orthonormal_columns(rng, d, p), _orthonormal_columns(rng, k, q),
                         rng.standard_normal((T, v)))


def synth_dataset(recipe: str, dims: dict, tasks: Sequence[TaskSpec], noise: float,
                  seed: int, n_samples: int = 256) -> SynthTaskData:
    """Generate a dataset; identical arguments give identical bytes."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = seeded_rng(seed)
    T = len(tasks)
    if recipe == "shared-lowrank-regression":
        d, k = int(dims["d"]), int(dims["k"])
        p, q, v = int(dims["p"]), int(dims["q"]), int(dims["v"])
        for s in tasks:
            if s.loss_kind != "mse":
                raise ValueError("shared-lowrank-regression tasks must use the mse loss")
        W0 = rng.standard_normal((d, k)) / np.sqrt(k)
        truth = true_factors(d, k, T, p, q, v, rng)
        dW = reconstruct(truth)
        xs, ys = [], []
        for t in range(T):
            X = rng.standard_normal((n_samples, k))
            Y = X @ (W0 + dW[:, :, t]).T + noise * rng.standard_normal((n_samples, d))
            xs.append(X)
            ys.append(Y)
        return SynthTaskData(recipe, seed, noise, xs, ys,
                             truth={"W0": W0, "factors": truth, "delta": dW})

    H, W, Cin = int(dims["grid_h"]), int(dims["grid_w"]), int(dims["in_channels"])
    latent = int(dims.get("latent", 4))
    field_ = rng.standard_normal((n_samples, H, W, latent))
    # one round of periodic neighbour averaging for spatial smoothness
    field_ = (field_ + np.roll(field_, 1, 1) + np.roll(field_, -1, 1)
              + np.roll(field_, 1, 2) + np.roll(field_, -1, 2)) / np.sqrt(5.0)
    mix = rng.standard_normal((latent, Cin)) / np.sqrt(latent)
    X = field_ @ mix + 0.1 * rng.standard_normal((n_samples, H, W, Cin))
    xs, ys = [], []
    for spec in tasks:
        M = rng.standard_normal((latent, spec.out_channels)) / np.sqrt(latent)
        z = field_ @ M  # (n, H, W, N_t)
        if spec.loss_kind == "cross_entropy":
            y = np.argmax(z, axis=-1)
        elif spec.loss_kind == "cosine":
            z = z.copy()
            z[..., -1] += 1.0
            y = z / np.linalg.norm(z, axis=-1, keepdims=True)
            y = np.moveaxis(y, -1, 1)
        else:
            y = np.tanh(z) + noise * rng.standard_normal(z.shape)
            y = np.moveaxis(y, -1, 1)
        xs.append(X)
        ys.append(np.ascontiguousarray(y))
    return SynthTaskData(recipe, seed, noise, xs, ys)


def noise_floor(data: SynthTaskData, n_draws: int = 64, seed: int = 12345) -> list[float]:
    """Monte-Carlo estimate of the best achievable per-task MSE.

    Fresh noise is drawn on the recorded inputs and the true weights are used
    as the predictor, so the estimate converges to ``noise**2``.
    """
    if data.recipe != "shared-lowrank-regression":
        raise ValueError("noise floor is defined for the shared-lowrank-regression recipe")
    rng = seeded_rng(seed)
    W0, dW = data.truth["W0"], data.truth["delta"]
    floors = []
    for t in range(data.n_tasks):
        X = data.inputs[t]
        clean = X @ (W0 + dW[:, :, t]).T
        acc = 0.0
        for _ in range(n_draws):
            y = clean + data.noise * rng.standard_normal(clean.shape)
            acc += np.mean((clean - y) ** 2)
        floors.append(acc / n_draws)
    return floors
