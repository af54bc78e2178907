"""Hand-derived backward rules, a finite-difference checker, and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .adapter import AdaptedLinear, LoraPair, TuckerFactors, seeded_rng
from .tensor import as_tensor3, kronecker, mode_n_product, unfold

__all__ = [
    "backward_adapted_linear",
    "backward_tucker",
    "backward_lora",
    "finite_diff_check",
    "GradCheckReport",
    "AdamState",
    "lr_at",
    "adam_step",
    "NonFiniteGradient",
]


def backward_adapted_linear(layer: AdaptedLinear, x, t: int, upstream, mask=None,
                            delta: np.ndarray | None = None):
    """Gradients of ``h = W0 x + delta_t (mask * x)``.

    Returns ``(d_delta, dx)``; ``x`` and ``upstream`` may carry leading batch
    axes, in which case ``d_delta`` is summed over them. No gradient is ever
    formed for ``W0``.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    d, k = layer.shape
    if x.shape[-1] != k or g.shape[-1] != d or x.shape[:-1] != g.shape[:-1]:
        raise ValueError(f"shape mismatch: x {x.shape}, upstream {g.shape}, layer {(d, k)}")
    if delta is None:
        delta = layer.delta(t)
    xa = x if mask is None else x * mask
    g2 = g.reshape(-1, d)
    d_delta = g2.T @ xa.reshape(-1, k)
    dx_adapter = g @ delta
    if mask is not None:
        dx_adapter = dx_adapter * mask
    dx = g @ layer.W0 + dx_adapter
    return d_delta, dx


def backward_tucker(dW, f: TuckerFactors) -> dict[str, np.ndarray]:
    """Chain rule from ``dL/dDeltaW`` (shape ``(d, k, T)``) to the Tucker factors."""
    L = as_tensor3(dW, "dL/dW")
    if L.shape != f.dims[:3]:
        raise ValueError(f"gradient tensor has shape {L.shape}, factors give {f.dims[:3]}")
    G = f.G
    dU1 = unfold(L, 1) @ kronecker(f.U3, f.U2) @ unfold(G, 1).T
    dU2 = unfold(L, 2) @ kronecker(f.U1, f.U3) @ unfold(G, 2).T
    dU3 = unfold(L, 3) @ kronecker(f.U2, f.U1) @ unfold(G, 3).T
    dG = mode_n_product(mode_n_product(mode_n_product(L, f.U1.T, 1), f.U2.T, 2), f.U3.T, 3)
    return {"G": dG, "U1": dU1, "U2": dU2, "U3": dU3}


def backward_tucker_slices(slice_grads: Mapping[int, np.ndarray], f: TuckerFactors):
    """Same as :func:`backward_tucker` when only a few task slices carry gradient."""
    d, k, T = f.dims[:3]
    L = np.zeros((d, k, T))
    for t in sorted(slice_grads):
        L[:, :, t] += slice_grads[t]
    return backward_tucker(L, f)


def backward_lora(d_delta, pair: LoraPair) -> dict[str, np.ndarray]:
    """Gradients of ``delta = B A`` given ``dL/d delta``."""
    return {"B": d_delta @ pair.A.T, "A": pair.B.T @ d_delta}


# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple, float, float] | None = None

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def allocate_coords(sizes: list[int], budget: int) -> list[int]:
    """Split ``budget`` coordinates over tensors as evenly as their sizes allow.

    Every tensor gets at least one coordinate; when the budget covers every
    entry, every entry is checked.
    """
    alloc = [0] * len(sizes)
    remaining = max(budget, len(sizes))
    open_ = [i for i, s in enumerate(sizes) if s > 0]
    while open_ and remaining > 0:
        share = max(1, remaining // len(open_))
        next_open = []
        for i in open_:
            take = min(share, sizes[i] - alloc[i], remaining)
            alloc[i] += take
            remaining -= take
            if alloc[i] < sizes[i]:
                next_open.append(i)
            if remaining == 0:
                break
        open_ = next_open
    return alloc


def finite_diff_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                      analytic: Mapping[str, np.ndarray], h: float = 1e-6,
                      n_coords: int = 200, seed: int = 0,
                      floor: float = 1e-8) -> GradCheckReport:
    """Compare ``analytic`` gradients against central differences.

    ``loss_fn`` is called with no arguments and must read the arrays in
    ``params``, which are perturbed in place and restored. ``n_coords``
    random coordinates are spread over the parameters (all of them if there
    are fewer). The error for one coordinate is
    ``|a - b| / max(|a|, |b|, floor)``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    rng = seeded_rng(seed)
    names = list(params)
    if not names:
        raise ValueError("no parameters to check")
    alloc = allocate_coords([params[n].size for n in names], n_coords)
    errors = []
    per_param = {}
    worst = None
    for name, n_take in zip(names, alloc):
        arr = params[name]
        grad = np.asarray(analytic[name])
        if grad.shape != arr.shape:
            raise ValueError(f"{name}: analytic gradient shape {grad.shape} != {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"{name}: parameter must be contiguous to perturb in place")
        gflat = grad.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n_take >= n else np.sort(rng.choice(n, size=n_take, replace=False))
        pmax = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"{name}[{i}]: loss is not finite under perturbation")
            num = float((fp - fm) / (2 * h))
            a = float(gflat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            errors.append(err)
            pmax = max(pmax, err)
            if worst is None or err > worst[3]:
                idx_nd = tuple(int(j) for j in np.unravel_index(i, arr.shape))
                worst = (name, idx_nd, a, err)
        per_param[name] = pmax
    return GradCheckReport(max(errors), float(np.mean(errors)), len(errors), per_param, worst)


# --------------------------------------------------------------------------


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    total_steps: int = 1
    warmup_ratio: float = 0.05
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.total_steps)


def lr_at(step: int, state: AdamState) -> float:
    """Linear warmup from 0 to ``lr`` then linear decay to 0 at ``total_steps``.

    The ``s``-th optimizer update (1-based) uses ``lr_at(s)``, so the first
    update runs at ``lr / warmup_steps`` and the last at 0.
    """
    total = state.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = state.warmup_steps
    if step < warm:
        return state.lr * step / warm
    if total == warm:
        return state.lr
    return state.lr * (total - step) / (total - warm)


def no_decay(name: str) -> bool:
    """Layer-norm biases and no-mask embeddings are excluded from weight decay."""
    return name.endswith(".embed") or (".ln" in name and name.endswith(".bias"))


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState):
    """One Adam update with bias correction and decoupled weight decay, in place.

    Parameters are visited in the mapping's order. Returns ``(params, state)``.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    lr = lr_at(t, state)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if state.weight_decay and not no_decay(name):
            p -= lr * state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
