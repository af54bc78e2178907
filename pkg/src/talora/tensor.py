"""Dense third-order tensor algebra.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order
(row-major, last index fastest). Matrices are 2-D arrays with the same
storage. Modes are numbered 1, 2, 3 throughout this module.

Unfoldings use the cyclic column ordering: the mode-n unfolding has rows
indexed by mode n and columns indexed by the two remaining modes taken
cyclically (n+1, n+2), with mode n+1 varying fastest. Under that ordering
the Tucker reconstruction obeys

    X_(1) = U1 G_(1) (U3 kron U2)^T
    X_(2) = U2 G_(2) (U1 kron U3)^T
    X_(3) = U3 G_(3) (U2 kron U1)^T
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "as_tensor3",
    "real_dtype",
    "as_matrix",
    "mode_n_product",
    "unfold",
    "fold",
    "kronecker",
    "frobenius_norm",
    "tucker_oracle",
]


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite entries")


def real_dtype(x) -> np.dtype:
    """float64, or ``longdouble`` when the input already carries extended precision."""
    dt = getattr(x, "dtype", None)
    return np.dtype(np.longdouble) if dt == np.longdouble else np.dtype(np.float64)


def as_tensor3(x, name: str = "tensor") -> np.ndarray:
    """Validate and return ``x`` as a finite float64 C-ordered 3-way array."""
    a = np.ascontiguousarray(x, dtype=real_dtype(x))
    if a.ndim != 3:
        raise ValueError(f"{name} must have 3 modes, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"{name} must have positive dimensions, got {a.shape}")
    _check_finite(a, name)
    return a


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return ``x`` as a finite float64 C-ordered matrix."""
    a = np.ascontiguousarray(x, dtype=real_dtype(x))
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ValueError(f"{name} must have positive dimensions, got {a.shape}")
    _check_finite(a, name)
    return a


def _check_mode(n: int) -> int:
    if n not in (1, 2, 3):
        raise ValueError(f"mode index must be 1, 2 or 3, got {n!r}")
    return n - 1


def mode_n_product(X, U, n: int) -> np.ndarray:
    """Contract mode ``n`` of ``X`` against the columns of ``U``.

    ``U`` has shape ``(J, I_n)`` and the result satisfies
    ``Z[..., j, ...] = sum_l X[..., l, ...] * U[j, l]``.
    """
    X = as_tensor3(X, "X")
    U = as_matrix(U, "U")
    ax = _check_mode(n)
    if U.shape[1] != X.shape[ax]:
        raise ValueError(
            f"mode-{n} product: U has {U.shape[1]} columns but X has size "
            f"{X.shape[ax]} along mode {n}"
        )
    Z = np.tensordot(U, X, axes=([1], [ax]))  # new mode first
    return np.ascontiguousarray(np.moveaxis(Z, 0, ax))


def _cyclic_perm(ax: int) -> tuple[int, int, int]:
    # row mode, then the slow column mode, then the fast column mode
    return (ax, (ax + 2) % 3, (ax + 1) % 3)


def unfold(X, n: int) -> np.ndarray:
    """Mode-``n`` matricization with cyclic column ordering."""
    X = as_tensor3(X, "X")
    ax = _check_mode(n)
    Y = np.transpose(X, _cyclic_perm(ax))
    return np.ascontiguousarray(Y.reshape(X.shape[ax], -1))


def fold(M, n: int, dims) -> np.ndarray:
    """Inverse of :func:`unfold` for a tensor of shape ``dims``."""
    M = as_matrix(M, "M")
    ax = _check_mode(n)
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3:
        raise ValueError(f"dims must have length 3, got {dims}")
    perm = _cyclic_perm(ax)
    pdims = tuple(dims[p] for p in perm)
    if M.shape != (pdims[0], pdims[1] * pdims[2]):
        raise ValueError(
            f"cannot fold matrix of shape {M.shape} into mode-{n} tensor {dims}"
        )
    Y = M.reshape(pdims)
    return np.ascontiguousarray(np.transpose(Y, np.argsort(perm)))


def kronecker(A, B) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``A[i, j] * B``."""
    A = as_matrix(A, "A")
    B = as_matrix(B, "B")
    return np.kron(A, B)


def frobenius_norm(X) -> float:
    a = np.asarray(X, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def tucker_oracle(G, U1, U2, U3) -> np.ndarray:
    """Literal quadruple-sum Tucker reconstruction.

    Deliberately slow: every entry is accumulated with explicit Python loops
    and ``math.fsum`` so it shares no code path with the fast reconstruction.
    """
    G = as_tensor3(G, "G")
    U1 = as_matrix(U1, "U1")
    U2 = as_matrix(U2, "U2")
    U3 = as_matrix(U3, "U3")
    p, q, v = G.shape
    for name, U, r in (("U1", U1, p), ("U2", U2, q), ("U3", U3, v)):
        if U.shape[1] != r:
            raise ValueError(
                f"{name} has {U.shape[1]} columns but the core expects {r}"
            )
    d, k, T = U1.shape[0], U2.shape[0], U3.shape[0]
    g = G.tolist()
    u1, u2, u3 = U1.tolist(), U2.tolist(), U3.tolist()
    out = [[[0.0] * T for _ in range(k)] for _ in range(d)]
    for i in range(d):
        for j in range(k):
            for t in range(T):
                terms = []
                for m in range(p):
                    for n_ in range(q):
                        for l in range(v):
                            terms.append(g[m][n_][l] * u1[i][m] * u2[j][n_] * u3[t][l])
                out[i][j][t] = math.fsum(terms)
    return np.array(out, dtype=np.float64)
