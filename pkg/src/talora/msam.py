"""A desk-scale multi-task segment-anything style model.

A frozen pre-LN transformer encoder turns an ``(H, W, C_in)`` feature grid
into an image embedding of shape ``(C, H, W)``. Every attention block has
adapters on its query, key and value projections; layer-norm scale and bias
are trainable. Each task owns a no-mask embedding of shape ``(N_t, C, H, W)``
that is added to the broadcast image embedding, and a small decoder that maps
each of the ``N_t`` channel groups to one output map, giving ``(N_t, H, W)``.

Trainable parameter order (stable, used by the optimizer and checkpoints)::

    enc.{l}.attn.{q,k,v}.<adapter params>   for l = 0..L-1
    enc.{l}.ln1.scale, enc.{l}.ln1.bias, enc.{l}.ln2.scale, enc.{l}.ln2.bias
    enc.ln_out.scale, enc.ln_out.bias
    task.{t}.embed, task.{t}.dec.W1, task.{t}.dec.b1, task.{t}.dec.W2, task.{t}.dec.b2

Adapter params are ``G, U1, U2, U3`` (TA-LoRA), ``B.{t}, A.{t}`` per task
(LoRA-STL) or ``B, A`` (LoRA-HPS).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .adapter import (
    AdaptedLinear,
    AdapterSpec,
    LoraPerTask,
    TuckerFactors,
    array_caster,
    make_adapter,
    recast,
    seeded_rng,
    sub_seed,
)
from .grad import backward_lora, backward_tucker_slices
from .tensor import real_dtype
from .objective import (
    TaskSpec,
    orthogonality_gradients,
    orthogonality_penalty,
    task_loss_and_grad,
    task_weights,
)

PROJECTIONS = ("q", "k", "v")
LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    width: int = 32
    grid_h: int = 8
    grid_w: int = 8
    heads: int = 4
    in_channels: int = 8
    mlp_ratio: int = 2
    decoder_hidden: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("layers", "width", "grid_h", "grid_w", "heads", "in_channels",
                     "mlp_ratio", "decoder_hidden"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"encoder.{name} must be a positive integer, got {value!r}")
        if self.width % self.heads:
            raise ValueError(f"encoder.width={self.width} not divisible by heads={self.heads}")

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _ln_forward(x, scale, bias):
    xc = x - x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * scale + bias, (xh, inv)


def _ln_backward(dy, cache, scale):
    xh, inv = cache
    dscale = np.sum(dy * xh, axis=0)
    dbias = np.sum(dy, axis=0)
    dxh = dy * scale
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                - xh * np.mean(dxh * xh, axis=-1, keepdims=True))
    return dx, dscale, dbias


def _gelu(z):
    th = np.tanh(_GELU_C * (z + 0.044715 * z**3))
    return 0.5 * z * (1.0 + th), th


def _gelu_grad(z, th):
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)


def _softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class ToyModel:
    """Frozen encoder, q/k/v adapters, per-task embeddings and decoders."""

    def __init__(self, cfg: EncoderConfig, tasks: Sequence[TaskSpec], adapter: AdapterSpec):
        if not tasks:
            raise ValueError("at least one task is required")
        if [t.id for t in tasks] != list(range(len(tasks))):
            raise ValueError("task ids must be 0..T-1 in order")
        self.cfg = cfg
        self.tasks = list(tasks)
        self.adapter_spec = adapter
        C, T = cfg.width, len(tasks)
        rng = seeded_rng(cfg.seed)

        frozen = {}
        frozen["patch.W"] = rng.standard_normal((C, cfg.in_channels)) / math.sqrt(cfg.in_channels)
        frozen["patch.b"] = 0.02 * rng.standard_normal(C)
        frozen["patch.pos"] = 0.1 * rng.standard_normal((cfg.tokens, C))
        hidden = cfg.mlp_ratio * C
        self.qkv: list[dict[str, AdaptedLinear]] = []
        for l in range(cfg.layers):
            layer = {}
            for j, proj in enumerate(PROJECTIONS):
                W0 = rng.standard_normal((C, C)) / math.sqrt(C)
                layer[proj] = AdaptedLinear(
                    W0, make_adapter(adapter, C, C, T, sub_seed(cfg.seed, 1, l, j)),
                    dropout_rate=adapter.dropout,
                )
                frozen[f"enc.{l}.attn.{proj}.W0"] = layer[proj].W0
            self.qkv.append(layer)
            frozen[f"enc.{l}.attn.out.W"] = rng.standard_normal((C, C)) / math.sqrt(C)
            frozen[f"enc.{l}.attn.out.b"] = 0.02 * rng.standard_normal(C)
            frozen[f"enc.{l}.mlp.W1"] = rng.standard_normal((hidden, C)) / math.sqrt(C)
            frozen[f"enc.{l}.mlp.b1"] = 0.02 * rng.standard_normal(hidden)
            frozen[f"enc.{l}.mlp.W2"] = rng.standard_normal((C, hidden)) / math.sqrt(hidden)
            frozen[f"enc.{l}.mlp.b2"] = 0.02 * rng.standard_normal(C)
        self.frozen = {k: (v if not v.flags.writeable else _frozen(v)) for k, v in frozen.items()}

        params: dict[str, np.ndarray] = {}
        for l in range(cfg.layers):
            for proj in PROJECTIONS:
                for name, arr in self.qkv[l][proj].named_params():
                    params[f"enc.{l}.attn.{proj}.{name}"] = arr
        for l in range(cfg.layers):
            for ln in ("ln1", "ln2"):
                params[f"enc.{l}.{ln}.scale"] = np.ones(C)
                params[f"enc.{l}.{ln}.bias"] = np.zeros(C)
        params["enc.ln_out.scale"] = np.ones(C)
        params["enc.ln_out.bias"] = np.zeros(C)
        for spec in self.tasks:
            t, N = spec.id, spec.out_channels
            drng = seeded_rng(sub_seed(cfg.seed, 2, t))
            params[f"task.{t}.embed"] = np.zeros((N, C, cfg.grid_h, cfg.grid_w))
            params[f"task.{t}.dec.W1"] = drng.standard_normal((cfg.decoder_hidden, C)) / math.sqrt(C)
            params[f"task.{t}.dec.b1"] = np.zeros(cfg.decoder_hidden)
            params[f"task.{t}.dec.W2"] = (drng.standard_normal((N, cfg.decoder_hidden))
                                          / math.sqrt(cfg.decoder_hidden))
            params[f"task.{t}.dec.b2"] = np.zeros(N)
        self.params = params

    # ------------------------------------------------------------------ params

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def trainable_params(self) -> dict[str, np.ndarray]:
        return self.params

    def frozen_params(self) -> dict[str, np.ndarray]:
        return self.frozen

    def adapters(self):
        for l, layer in enumerate(self.qkv):
            for proj in PROJECTIONS:
                yield f"enc.{l}.attn.{proj}", layer[proj].adapter

    def adapter_param_count(self) -> int:
        C = self.cfg.width
        return self.cfg.layers * 3 * self.adapter_spec.count(C, C, self.n_tasks)

    def regularizer(self) -> float:
        if self.adapter_spec.kind != "ta_lora":
            return 0.0
        return sum(orthogonality_penalty(a, self.adapter_spec.ortho_core)
                   for _, a in self.adapters())

    def astype(self, dtype) -> "ToyModel":
        """Deep copy with every array cast to ``dtype`` (used by gradient checks)."""
        clone = copy.deepcopy(self)
        cast = array_caster(dtype)
        for layer in clone.qkv:
            for lin in layer.values():
                lin.W0 = cast(lin.W0)
                recast(lin.adapter, cast)
        clone.frozen = {k: cast(v) for k, v in clone.frozen.items()}
        clone.params = {k: cast(v) for k, v in clone.params.items()}
        return clone

    # ----------------------------------------------------------------- forward

    def _tokens(self, x):
        cfg = self.cfg
        x = np.asarray(x, dtype=real_dtype(x))
        if x.shape != (cfg.grid_h, cfg.grid_w, cfg.in_channels):
            raise ValueError(
                f"input grid must have shape {(cfg.grid_h, cfg.grid_w, cfg.in_channels)}, "
                f"got {x.shape}"
            )
        return x.reshape(cfg.tokens, cfg.in_channels)

    def _check_task(self, t):
        if not 0 <= t < self.n_tasks:
            raise IndexError(f"task index {t} out of range for {self.n_tasks} tasks")

    def task_deltas(self, t: int) -> list[dict[str, np.ndarray]]:
        return [{proj: layer[proj].delta(t) for proj in PROJECTIONS} for layer in self.qkv]

    def encode(self, x, t: int, mode: str = "eval", rng=None, deltas=None, cache=None):
        """Image embedding in token layout ``(H*W, C)`` for task ``t``."""
        self._check_task(t)
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg, P, F = self.cfg, self.params, self.frozen
        if deltas is None:
            deltas = self.task_deltas(t)
        N, C, nh = cfg.tokens, cfg.width, cfg.heads
        dh = C // nh
        tok = self._tokens(x)
        X = tok @ F["patch.W"].T + F["patch.b"] + F["patch.pos"]
        layers_cache = []
        for l in range(cfg.layers):
            lc = {}
            a, lc["ln1"] = _ln_forward(X, P[f"enc.{l}.ln1.scale"], P[f"enc.{l}.ln1.bias"])
            lc["a"] = a
            heads = {}
            for proj in PROJECTIONS:
                lin = self.qkv[l][proj]
                mask = None
                xa = a
                if mode == "train" and lin.dropout_rate > 0.0:
                    if rng is None:
                        raise ValueError("train mode with dropout needs an rng")
                    keep = rng.random(a.shape) >= lin.dropout_rate
                    mask = keep / (1.0 - lin.dropout_rate)
                    xa = a * mask
                out = a @ lin.W0.T + xa @ deltas[l][proj].T
                lc[f"{proj}.xa"] = xa
                lc[f"{proj}.mask"] = mask
                heads[proj] = out.reshape(N, nh, dh).transpose(1, 0, 2)
            Q, K, V = heads["q"], heads["k"], heads["v"]
            S = Q @ K.transpose(0, 2, 1) / math.sqrt(dh)
            Pm = _softmax(S)
            O = (Pm @ V).transpose(1, 0, 2).reshape(N, C)
            lc.update(Q=Q, K=K, V=V, P=Pm, O=O)
            X1 = X + O @ F[f"enc.{l}.attn.out.W"].T + F[f"enc.{l}.attn.out.b"]
            b, lc["ln2"] = _ln_forward(X1, P[f"enc.{l}.ln2.scale"], P[f"enc.{l}.ln2.bias"])
            z = b @ F[f"enc.{l}.mlp.W1"].T + F[f"enc.{l}.mlp.b1"]
            g, th = _gelu(z)
            X = X1 + g @ F[f"enc.{l}.mlp.W2"].T + F[f"enc.{l}.mlp.b2"]
            lc.update(z=z, th=th)
            layers_cache.append(lc)
        Y, ln_out = _ln_forward(X, P["enc.ln_out.scale"], P["enc.ln_out.bias"])
        if cache is not None:
            cache.update(layers=layers_cache, ln_out=ln_out, t=t)
        return Y

    def decode(self, Y, t: int, cache=None):
        """Task-``t`` head on token-layout embedding ``Y``; returns ``(N_t, H, W)``."""
        cfg, P = self.cfg, self.params
        Nt = self.tasks[t].out_channels
        E = P[f"task.{t}.embed"].reshape(Nt, cfg.width, cfg.tokens).transpose(0, 2, 1)
        Z = Y[None, :, :] + E  # (N_t, tokens, C)
        Hd = np.tanh(Z @ P[f"task.{t}.dec.W1"].T + P[f"task.{t}.dec.b1"])
        out = np.einsum("npj,nj->np", Hd, P[f"task.{t}.dec.W2"]) + P[f"task.{t}.dec.b2"][:, None]
        if cache is not None:
            cache.update(Z=Z, Hd=Hd)
        return out.reshape(Nt, cfg.grid_h, cfg.grid_w)

    def image_embedding(self, x, t: int, mode: str = "eval", rng=None) -> np.ndarray:
        """``I_t`` of shape ``(C, H, W)``."""
        Y = self.encode(x, t, mode, rng)
        return Y.T.reshape(self.cfg.width, self.cfg.grid_h, self.cfg.grid_w).copy()

    def forward_task(self, x, t: int, mode: str = "eval", rng=None, deltas=None, cache=None):
        """Prediction ``O_t`` of shape ``(N_t, H, W)`` for one input grid."""
        Y = self.encode(x, t, mode, rng, deltas, cache)
        return self.decode(Y, t, cache)

    # ---------------------------------------------------------------- backward

    def backward_task(self, cache, dout, deltas, grads, slice_grads):
        """Accumulate parameter gradients for one sample into ``grads``.

        ``slice_grads[(l, proj)]`` collects ``dL/d delta_t`` for task ``t``.
        """
        cfg, P, F = self.cfg, self.params, self.frozen
        t = cache["t"]
        Nt = self.tasks[t].out_channels
        N, C, nh = cfg.tokens, cfg.width, cfg.heads
        dh = C // nh
        dout = dout.reshape(Nt, N)
        Z, Hd = cache["Z"], cache["Hd"]
        W1, W2 = P[f"task.{t}.dec.W1"], P[f"task.{t}.dec.W2"]
        grads[f"task.{t}.dec.W2"] += np.einsum("np,npj->nj", dout, Hd)
        grads[f"task.{t}.dec.b2"] += dout.sum(axis=1)
        dpre = dout[:, :, None] * W2[:, None, :] * (1.0 - Hd * Hd)
        grads[f"task.{t}.dec.W1"] += np.einsum("npj,npc->jc", dpre, Z)
        grads[f"task.{t}.dec.b1"] += dpre.sum(axis=(0, 1))
        dZ = dpre @ W1  # (N_t, tokens, C)
        grads[f"task.{t}.embed"] += dZ.transpose(0, 2, 1).reshape(Nt, C, cfg.grid_h, cfg.grid_w)
        dY = dZ.sum(axis=0)

        dX, ds, db = _ln_backward(dY, cache["ln_out"], P["enc.ln_out.scale"])
        grads["enc.ln_out.scale"] += ds
        grads["enc.ln_out.bias"] += db
        for l in reversed(range(cfg.layers)):
            lc = cache["layers"][l]
            # MLP branch
            dg = dX @ F[f"enc.{l}.mlp.W2"]
            dz = dg * _gelu_grad(lc["z"], lc["th"])
            dbn = dz @ F[f"enc.{l}.mlp.W1"]
            dx1, ds, db = _ln_backward(dbn, lc["ln2"], P[f"enc.{l}.ln2.scale"])
            grads[f"enc.{l}.ln2.scale"] += ds
            grads[f"enc.{l}.ln2.bias"] += db
            dX1 = dX + dx1
            # attention branch
            dO = (dX1 @ F[f"enc.{l}.attn.out.W"]).reshape(N, nh, dh).transpose(1, 0, 2)
            Q, K, V, Pm = lc["Q"], lc["K"], lc["V"], lc["P"]
            dP = dO @ V.transpose(0, 2, 1)
            dV = Pm.transpose(0, 2, 1) @ dO
            dS = Pm * (dP - np.sum(dP * Pm, axis=-1, keepdims=True)) / math.sqrt(dh)
            dQ = dS @ K
            dK = dS.transpose(0, 2, 1) @ Q
            da = np.zeros((N, C))
            for proj, dH in (("q", dQ), ("k", dK), ("v", dV)):
                dproj = dH.transpose(1, 0, 2).reshape(N, C)
                lin = self.qkv[l][proj]
                slice_grads[(l, proj)] += dproj.T @ lc[f"{proj}.xa"]
                dxa = dproj @ deltas[l][proj]
                mask = lc[f"{proj}.mask"]
                if mask is not None:
                    dxa = dxa * mask
                da += dproj @ lin.W0 + dxa
            dx0, ds, db = _ln_backward(da, lc["ln1"], P[f"enc.{l}.ln1.scale"])
            grads[f"enc.{l}.ln1.scale"] += ds
            grads[f"enc.{l}.ln1.bias"] += db
            dX = dX1 + dx0

    def loss_and_grads(self, batch, lam: float = 0.0, mode: str = "train", rng=None,
                       need_grads: bool = True):
        """Multi-task batch objective and gradients.

        ``batch`` maps each task id to ``(xs, ys)`` with ``xs`` of shape
        ``(n, H, W, C_in)``. Returns ``(task_losses, reg, total, grads)``; the
        task losses are batch means, the total follows the weighted
        normalized sum plus ``lam * reg``.
        """
        C = self.cfg.width
        weights = task_weights(self.tasks)
        grads = {name: np.zeros_like(p) for name, p in self.params.items()} if need_grads else None
        slice_grads: dict[int, dict] = {}
        losses = []
        for spec in self.tasks:
            t = spec.id
            xs, ys = batch[t]
            n = len(xs)
            if n == 0:
                raise ValueError(f"task {t}: empty batch")
            deltas = self.task_deltas(t)
            sg = {(l, proj): np.zeros((C, C)) for l in range(self.cfg.layers) for proj in PROJECTIONS}
            acc = 0.0
            for j in range(n):
                cache = {} if need_grads else None
                out = self.forward_task(xs[j], t, mode, rng, deltas, cache)
                loss, dout = task_loss_and_grad(spec.loss_kind, out[None], np.asarray(ys[j])[None])
                acc += loss
                if need_grads and not np.isfinite(loss):
                    # the caller reports divergence; there is nothing to backpropagate
                    need_grads, grads = False, None
                if need_grads:
                    self.backward_task(cache, dout[0] * (weights[t] / n), deltas, grads, sg)
            losses.append(acc / n)
            slice_grads[t] = sg
        reg = self.regularizer()
        total = sum(w * L for w, L in zip(weights, losses)) + lam * reg
        if need_grads:
            self._adapter_grads(slice_grads, lam, grads)
        return losses, reg, total, grads

    def _adapter_grads(self, slice_grads, lam, grads):
        spec = self.adapter_spec
        for l, layer in enumerate(self.qkv):
            for proj in PROJECTIONS:
                prefix = f"enc.{l}.attn.{proj}"
                adapter = layer[proj].adapter
                per_task = {t: sg[(l, proj)] for t, sg in slice_grads.items()}
                if isinstance(adapter, TuckerFactors):
                    g = backward_tucker_slices(per_task, adapter)
                    if lam:
                        og = orthogonality_gradients(adapter, spec.ortho_core)
                        for name in g:
                            g[name] = g[name] + lam * og[name]
                    for name, arr in g.items():
                        grads[f"{prefix}.{name}"] += arr
                elif isinstance(adapter, LoraPerTask):
                    for t, dd in per_task.items():
                        g = backward_lora(dd, adapter.pairs[t])
                        grads[f"{prefix}.B.{t}"] += g["B"]
                        grads[f"{prefix}.A.{t}"] += g["A"]
                else:
                    dd = sum(per_task[t] for t in sorted(per_task))
                    g = backward_lora(dd, adapter.pair)
                    grads[f"{prefix}.B"] += g["B"]
                    grads[f"{prefix}.A"] += g["A"]


def build_model(cfg: EncoderConfig, tasks: Sequence[TaskSpec],
                adapter: AdapterSpec | tuple[int, int, int] = (4, 4, 2)) -> ToyModel:
    """Build a fresh :class:`ToyModel`; a ``(p, q, v)`` tuple means TA-LoRA."""
    if not isinstance(adapter, AdapterSpec):
        p, q, v = adapter
        adapter = AdapterSpec("ta_lora", p=p, q=q, v=v)
    return ToyModel(cfg, tasks, adapter)


def trainable_params(model) -> dict[str, np.ndarray]:
    return model.trainable_params()
