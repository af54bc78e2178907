"""Task-aware low-rank adapters and plain LoRA baselines.

Three adapter kinds share the :class:`AdaptedLinear` wrapper:

* :class:`TuckerFactors` stores one update tensor of shape ``(d, k, T)`` as a
  core ``G`` of shape ``(p, q, v)`` and factors ``U1 (d, p)``, ``U2 (k, q)``,
  ``U3 (T, v)``. Slice ``t`` of the tensor is the update for task ``t``.
* :class:`LoraPerTask` holds one ``B_t A_t`` pair per task.
* :class:`LoraShared` holds a single ``B A`` pair used by every task.

Task indices are 0-based everywhere in code.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator, Union

import numpy as np

from .tensor import as_matrix, as_tensor3, fold, kronecker, real_dtype, unfold

__all__ = [
    "TuckerFactors",
    "LoraPair",
    "LoraPerTask",
    "LoraShared",
    "AdaptedLinear",
    "init_factors",
    "init_lora",
    "reconstruct",
    "task_slice",
    "adapted_forward",
    "merge",
    "param_count",
    "seeded_rng",
    "AdapterSpec",
    "make_adapter",
]


def seeded_rng(seed: int) -> np.random.Generator:
    """The generator used for every random draw in the package (PCG64)."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _positive(**dims: int) -> None:
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass
class TuckerFactors:
    G: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray

    def __post_init__(self):
        self.G = as_tensor3(self.G, "G")
        self.U1 = as_matrix(self.U1, "U1")
        self.U2 = as_matrix(self.U2, "U2")
        self.U3 = as_matrix(self.U3, "U3")
        p, q, v = self.G.shape
        for name, U, r in (("U1", self.U1, p), ("U2", self.U2, q), ("U3", self.U3, v)):
            if U.shape[1] != r:
                raise ValueError(f"{name} has {U.shape[1]} columns, core expects {r}")

    @property
    def dims(self) -> tuple[int, int, int, int, int, int]:
        """``(d, k, T, p, q, v)``."""
        return (self.U1.shape[0], self.U2.shape[0], self.U3.shape[0]) + self.G.shape

    @property
    def n_tasks(self) -> int:
        return self.U3.shape[0]

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "G", self.G
        yield "U1", self.U1
        yield "U2", self.U2
        yield "U3", self.U3

    def copy(self) -> "TuckerFactors":
        return TuckerFactors(self.G.copy(), self.U1.copy(), self.U2.copy(), self.U3.copy())


@dataclass
class LoraPair:
    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        self.B = as_matrix(self.B, "B")
        self.A = as_matrix(self.A, "A")
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(
                f"LoRA rank mismatch: B is {self.B.shape}, A is {self.A.shape}"
            )

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        return self.B @ self.A

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield "B", self.B
        yield "A", self.A


@dataclass
class LoraPerTask:
    pairs: list[LoraPair]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("LoraPerTask needs at least one task")

    @property
    def n_tasks(self) -> int:
        return len(self.pairs)

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        for t, pair in enumerate(self.pairs):
            for name, arr in pair.named_params():
                yield f"{name}.{t}", arr


@dataclass
class LoraShared:
    pair: LoraPair

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.pair.named_params()


Adapter = Union[TuckerFactors, LoraPerTask, LoraShared]


def init_factors(d: int, k: int, T: int, p: int, q: int, v: int, seed: int) -> TuckerFactors:
    """Zero core, standard-normal factor matrices.

    The update tensor is therefore exactly zero until the core moves.
    """
    _positive(d=d, k=k, T=T, p=p, q=q, v=v)
    if p > min(d, k) or q > min(d, k):
        raise ValueError(f"p={p}, q={q} must not exceed min(d, k)={min(d, k)}")
    if max(p, q, v) * 2 > min(d, k):
        warnings.warn(
            f"core dims (p={p}, q={q}, v={v}) are not small relative to "
            f"min(d, k)={min(d, k)}",
            stacklevel=2,
        )
    rng = seeded_rng(seed)
    U1 = rng.standard_normal((d, p))
    U2 = rng.standard_normal((k, q))
    U3 = rng.standard_normal((T, v))
    return TuckerFactors(np.zeros((p, q, v)), U1, U2, U3)


def init_lora(d: int, k: int, r: int, seed: int) -> LoraPair:
    """``B = 0`` and ``A ~ N(0, 1/r)``."""
    _positive(d=d, k=k, r=r)
    rng = seeded_rng(seed)
    A = rng.standard_normal((r, k)) / np.sqrt(r)
    return LoraPair(np.zeros((d, r)), A)


def reconstruct(f: TuckerFactors) -> np.ndarray:
    """Full update tensor ``(d, k, T)`` via the mode-1 unfolding identity."""
    d, k, T = f.dims[:3]
    W1 = f.U1 @ unfold(f.G, 1) @ kronecker(f.U3, f.U2).T
    return fold(W1, 1, (d, k, T))


def task_slice(f: TuckerFactors, t: int) -> np.ndarray:
    """Update matrix ``(d, k)`` for task ``t`` without building the full tensor."""
    T = f.n_tasks
    if not 0 <= t < T:
        raise IndexError(f"task index {t} out of range for {T} tasks")
    u3 = f.U3[t : t + 1]  # (1, v)
    return f.U1 @ unfold(f.G, 1) @ kronecker(u3, f.U2).T


def adapter_delta(adapter: Adapter, t: int) -> np.ndarray:
    """The ``(d, k)`` update applied for task ``t`` by any adapter kind."""
    if isinstance(adapter, TuckerFactors):
        return task_slice(adapter, t)
    if isinstance(adapter, LoraPerTask):
        if not 0 <= t < adapter.n_tasks:
            raise IndexError(f"task index {t} out of range for {adapter.n_tasks} tasks")
        return adapter.pairs[t].delta()
    if isinstance(adapter, LoraShared):
        return adapter.pair.delta()
    raise TypeError(f"unknown adapter kind {type(adapter).__name__}")


def adapter_n_tasks(adapter: Adapter) -> int | None:
    if isinstance(adapter, LoraShared):
        return None
    return adapter.n_tasks


@dataclass
class AdaptedLinear:
    """A frozen ``(d, k)`` weight plus a trainable low-rank update."""

    W0: np.ndarray
    adapter: Adapter
    dropout_rate: float = 0.0

    def __post_init__(self):
        W0 = as_matrix(self.W0, "W0").copy()
        W0.flags.writeable = False
        self.W0 = W0
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape

    def check_task(self, t: int) -> None:
        n = adapter_n_tasks(self.adapter)
        if n is not None and not 0 <= t < n:
            raise IndexError(f"task index {t} out of range for {n} tasks")

    def delta(self, t: int) -> np.ndarray:
        self.check_task(t)
        return adapter_delta(self.adapter, t)

    def named_params(self) -> Iterator[tuple[str, np.ndarray]]:
        yield from self.adapter.named_params()


def recast(adapter: Adapter, cast) -> None:
    """Replace every array held by ``adapter`` with ``cast(array)``, in place."""
    if isinstance(adapter, TuckerFactors):
        adapter.G, adapter.U1 = cast(adapter.G), cast(adapter.U1)
        adapter.U2, adapter.U3 = cast(adapter.U2), cast(adapter.U3)
        return
    pairs = adapter.pairs if isinstance(adapter, LoraPerTask) else [adapter.pair]
    for pair in pairs:
        pair.B, pair.A = cast(pair.B), cast(pair.A)


def array_caster(dtype):
    """A memoized ``astype`` that keeps shared arrays shared and frozen arrays frozen."""
    memo: dict[int, np.ndarray] = {}

    def cast(a: np.ndarray) -> np.ndarray:
        key = id(a)
        if key not in memo:
            b = a.astype(dtype)
            b.flags.writeable = a.flags.writeable
            memo[key] = b
        return memo[key]

    return cast


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier: 0 for dropped entries, ``1/(1-rate)`` otherwise."""
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def adapted_forward(layer: AdaptedLinear, x, t: int, mode: str = "eval", rng=None,
                    delta: np.ndarray | None = None):
    """``W0 x + delta_t x``; the adapter branch alone sees dropout in train mode.

    ``x`` may be a vector of length ``k`` or an array whose last axis has length
    ``k``. Returns ``(h, mask)`` where ``mask`` is the dropout multiplier used
    on the adapter input (``None`` in eval mode).
    """
    x = np.asarray(x, dtype=real_dtype(x))
    d, k = layer.shape
    if x.shape[-1] != k:
        raise ValueError(f"input has trailing size {x.shape[-1]}, layer expects {k}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if delta is None:
        delta = layer.delta(t)
    else:
        layer.check_task(t)
    mask = None
    xa = x
    if mode == "train" and layer.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        mask = dropout_mask(x.shape, layer.dropout_rate, rng)
        xa = x * mask
    h = x @ layer.W0.T + xa @ delta.T
    return h, mask


def merge(layer: AdaptedLinear, t: int) -> np.ndarray:
    """Inference weight ``W0 + delta_t`` as a new array."""
    return layer.W0 + layer.delta(t)


def param_count(kind: str, d: int, k: int, T: int, p: int | None = None,
                q: int | None = None, v: int | None = None, r: int | None = None) -> int:
    """Trainable adapter scalars for one ``(d, k)`` matrix; ``W0`` excluded.

    ``kind`` is ``"ta_lora"``, ``"lora_stl"`` (one pair per task) or
    ``"lora_hps"`` (one shared pair).
    """
    if kind == "ta_lora":
        if None in (p, q, v):
            raise ValueError("ta_lora needs p, q and v")
        return p * q * v + d * p + k * q + T * v
    if r is None:
        raise ValueError(f"{kind} needs a rank r")
    if kind == "lora_stl":
        return T * (r * d + r * k)
    if kind == "lora_hps":
        return r * d + r * k
    raise ValueError(f"unknown adapter kind {kind!r}")


@dataclass(frozen=True)
class AdapterSpec:
    """Adapter kind and size for one adapted matrix."""

    kind: str = "ta_lora"
    p: int = 4
    q: int = 4
    v: int = 2
    r: int = 4
    dropout: float = 0.0
    ortho_core: bool = True

    def __post_init__(self):
        if self.kind not in ("ta_lora", "lora_stl", "lora_hps"):
            raise ValueError(f"adapter.kind must be ta_lora, lora_stl or lora_hps, got {self.kind!r}")
        for name in ("p", "q", "v", "r"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"adapter.{name} must be a positive integer, got {value!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"adapter.dropout must be in [0, 1), got {self.dropout}")

    def count(self, d: int, k: int, T: int) -> int:
        if self.kind == "ta_lora":
            return param_count("ta_lora", d, k, T, p=self.p, q=self.q, v=self.v)
        return param_count(self.kind, d, k, T, r=self.r)


def sub_seed(seed: int, *path: int) -> int:
    """Deterministic child seed for a component addressed by ``path``."""
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def make_adapter(spec: AdapterSpec, d: int, k: int, T: int, seed: int):
    if spec.kind == "ta_lora":
        return init_factors(d, k, T, spec.p, spec.q, spec.v, seed)
    if spec.kind == "lora_stl":
        return LoraPerTask([init_lora(d, k, spec.r, sub_seed(seed, t)) for t in range(T)])
    return LoraShared(init_lora(d, k, spec.r, seed))
