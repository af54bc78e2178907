"""Finite-difference audit of every trainable parameter of a model.

The analytic gradients come from the model's float64 backward pass. The
numerical side re-evaluates the loss on an extended-precision copy of the
model, which keeps central-difference roundoff far below the 1e-5 relative
tolerance even for gradient entries of order 1e-8.
"""

from __future__ import annotations

import numpy as np

from .adapter import LoraPerTask, TuckerFactors, seeded_rng
from .grad import GradCheckReport, finite_diff_check

__all__ = ["move_off_init", "random_batch", "check_model"]


def _near_orthonormal(rng, rows, cols, jitter):
    Q, _ = np.linalg.qr(rng.standard_normal((rows, max(cols, 1))))
    return Q[:, :cols] + jitter * rng.standard_normal((rows, cols))


def move_off_init(model, seed: int = 0, jitter: float = 0.1) -> None:
    """Give structurally-zero parameters generic values, in place.

    At initialization the core (or ``B``) is zero, which makes several
    gradients vanish identically. This moves adapters to a point near
    orthonormality (so the regularizer is small but active) and fills
    embeddings and biases with small random values.
    """
    rng = seeded_rng(seed)
    for _, adapter in model.adapters():
        if isinstance(adapter, TuckerFactors):
            d, k, T, p, q, v = adapter.dims
            adapter.U1[...] = _near_orthonormal(rng, d, p, jitter)
            adapter.U2[...] = _near_orthonormal(rng, k, q, jitter)
            adapter.U3[...] = rng.standard_normal((T, v))
            for l in range(v):
                adapter.G[:, :, l] = _near_orthonormal(rng, p, q, jitter)
        else:
            pairs = adapter.pairs if isinstance(adapter, LoraPerTask) else [adapter.pair]
            for pair in pairs:
                pair.B[...] = 0.3 * rng.standard_normal(pair.B.shape)
    for name, arr in model.trainable_params().items():
        if name.endswith(".embed") or name.endswith(".bias") or name.endswith(".b1") \
                or name.endswith(".b2"):
            arr[...] = 0.1 * rng.standard_normal(arr.shape)
        elif name.endswith(".scale"):
            arr[...] = 1.0 + 0.1 * rng.standard_normal(arr.shape)


def random_batch(model, n: int = 1, seed: int = 0) -> dict:
    """A small batch with valid targets for every task of ``model``."""
    rng = seeded_rng(seed)
    batch = {}
    cfg = getattr(model, "cfg", None)
    for spec in model.tasks:
        if cfg is not None:
            xs = rng.standard_normal((n, cfg.grid_h, cfg.grid_w, cfg.in_channels))
            shape = (n, spec.out_channels, cfg.grid_h, cfg.grid_w)
        else:
            d, k = model.layer.shape
            xs = rng.standard_normal((n, k))
            shape = (n, d)
        if spec.loss_kind == "cross_entropy":
            ys = rng.integers(0, spec.out_channels, (n,) + shape[2:])
        elif spec.loss_kind == "cosine":
            ys = rng.standard_normal(shape) + 0.5
        else:
            ys = rng.standard_normal(shape)
        batch[spec.id] = (xs, ys)
    return batch


def check_model(model, batch, lam: float = 1.0, mode: str = "train", h: float = 1e-6,
                n_coords: int = 200, seed: int = 0, names=None) -> GradCheckReport:
    """Compare the model's analytic gradients against central differences.

    In train mode the dropout generator is re-seeded for every evaluation so
    the analytic and numerical passes see identical masks.
    """
    _, _, _, grads = model.loss_and_grads(batch, lam=lam, mode=mode, rng=seeded_rng(seed))
    hi = model.astype(np.longdouble)
    hbatch = {t: (np.asarray(x, dtype=np.longdouble), y if np.issubdtype(np.asarray(y).dtype, np.integer)
                  else np.asarray(y, dtype=np.longdouble))
              for t, (x, y) in batch.items()}

    def loss_fn():
        return hi.loss_and_grads(hbatch, lam=lam, mode=mode, rng=seeded_rng(seed),
                                 need_grads=False)[2]

    params = hi.trainable_params()
    if names is not None:
        params = {n: params[n] for n in names}
    return finite_diff_check(loss_fn, params, grads, h=h, n_coords=n_coords, seed=seed)
