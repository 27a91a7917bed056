"""Small reverse-mode differentiation engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together
with a closure computing input gradients from the output gradient;
:func:`backward` replays the record in reverse. Tensors have rank 0, 1 or
2. Broadcasting follows numpy but is only defined up to rank 2.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape():
        loss = reduce_mean(square(matmul(x, w)))
    backward(loss)
    w.grad
"""
from __future__ import annotations

import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class ContractError(ValueError):
    """Raised when an operation is called with incompatible shapes or state."""


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    """

    def __init__(self):
        self.ops: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ContractError(f"tensors have rank <= 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=track)
    if track:
        t._tape = tape
        t._index = len(tape.ops)
        tape.ops.append((t, parents, grad_fn))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is released afterwards (its entries form reference cycles with
    the tensors), so each tape supports a single backward pass.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring gradients")
    if loss._tape is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = loss._tape
    if tape.consumed:
        raise ContractError("this tape was already used by a backward pass")
    ops = tape.ops
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, grad_fn in reversed(ops[: loss._index + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, grad_fn(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._tape is None:
                p.grad = gp.copy() if p.grad is None else p.grad + gp
            else:
                key = id(p)
                grads[key] = grads[key] + gp if key in grads else gp
    tape.ops = []
    tape.consumed = True


# --------------------------------------------------------------- sparse adjacency


class SparseAdj:
    """Constant CSR operator with per-row normalisation constants.

    The effective matrix is ``diag(1/row_norm) @ M`` for mode ``"mean"``,
    ``D^-1/2 (M + I) D^-1/2`` for ``"sym"`` and ``M`` for ``"none"``.
    """

    def __init__(self, matrix: sp.spmatrix, mode: str = "none"):
        m = sp.csr_matrix(matrix, dtype=np.float64)
        if m.shape[0] != m.shape[1] and mode == "sym":
            raise ContractError(f"symmetric normalisation needs a square matrix, got {m.shape}")
        m.sum_duplicates()
        m.sort_indices()
        if mode == "sym":
            m = (m + sp.identity(m.shape[0], format="csr")).tocsr()
            deg = np.asarray(m.sum(axis=1)).ravel()
            inv = 1.0 / np.sqrt(deg)
            m = sp.diags(inv) @ m @ sp.diags(inv)
            norm = np.sqrt(deg)
        elif mode == "mean":
            cnt = np.diff(m.indptr).astype(np.float64)
            norm = np.where(cnt > 0, cnt, 1.0)
            m = sp.diags(1.0 / norm) @ m
        elif mode == "none":
            norm = np.ones(m.shape[0])
        else:
            raise ContractError(f"unknown normalisation mode {mode!r}")
        m = sp.csr_matrix(m)
        m.sort_indices()
        self.matrix = m
        self.row_norm = norm
        self.mode = mode
        self._t: sp.csr_matrix | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def transposed(self) -> sp.csr_matrix:
        if self._t is None:
            self._t = self.matrix.T.tocsr()
        return self._t

    def block_diag(self, blocks: int) -> "SparseAdj":
        """Same operator repeated ``blocks`` times along the diagonal."""
        out = SparseAdj.__new__(SparseAdj)
        out.matrix = sp.kron(sp.identity(blocks, format="csr"), self.matrix, format="csr")
        out.matrix.sort_indices()
        out.row_norm = np.tile(self.row_norm, blocks)
        out.mode = self.mode
        out._t = None
        return out

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


# ----------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    A, B = a.data, b.data
    return _record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def sparse_matmul(adj: SparseAdj, x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise ContractError(f"sparse_matmul: shapes {adj.shape} and {x.shape} are incompatible")
    return _record(adj.matrix @ x.data, (x,), lambda g: (adj.transposed @ g,))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _record(t, (a,), lambda g: (g * (1.0 - t * t),))


def row_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"row_softmax needs a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _record(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def log_row_softmax(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"log_row_softmax needs a matrix, got shape {a.shape}")
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    s = np.exp(out)
    return _record(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    A = a.data
    return _record(A * A, (a,), lambda g: (2.0 * g * A,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ContractError("sqrt of a negative value")
    r = np.sqrt(a.data)
    return _record(r, (a,), lambda g: (0.5 * g / r,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for positive a."""
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ContractError("power needs strictly positive input")
    A = a.data
    r = A**p
    return _record(r, (a,), lambda g: (g * p * r / A,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ContractError("log needs strictly positive input")
    A = a.data
    return _record(np.log(A), (a,), lambda g: (g / A,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ContractError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    cuts = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _record(np.hstack([p.data for p in parts]), tuple(parts), lambda g: tuple(np.hsplit(g, cuts)))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ContractError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    cuts = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _record(np.vstack([p.data for p in parts]), tuple(parts), lambda g: tuple(np.vsplit(g, cuts)))


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows; repeated indices accumulate in the backward pass."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError(f"index_rows: index out of range for {a.shape[0]} rows")
    n = a.shape[0]

    def grad(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), grad)


def reduce_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _record(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def reduce_mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.data.size
    return _record(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


def row_sum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"row_sum needs a matrix, got shape {a.shape}")
    shape = a.shape
    return _record(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def block_matmul(a: Tensor, b: Tensor, blocks: int) -> Tensor:
    """Per-block product of row-stacked matrices.

    ``a`` stacks ``blocks`` matrices of shape (m, k), ``b`` stacks (k, n);
    the result stacks the (m, n) products.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] % blocks or b.shape[0] % blocks:
        raise ContractError(f"block_matmul: {a.shape}, {b.shape} not divisible into {blocks} blocks")
    m, k = a.shape[0] // blocks, a.shape[1]
    if b.shape[0] // blocks != k:
        raise ContractError(f"block_matmul: block shapes ({m},{k}) and ({b.shape[0] // blocks},{b.shape[1]}) are incompatible")
    A = a.data.reshape(blocks, m, k)
    B = b.data.reshape(blocks, k, b.shape[1])

    def grad(g):
        G = g.reshape(blocks, m, -1)
        return (G @ B.transpose(0, 2, 1)).reshape(a.shape), (A.transpose(0, 2, 1) @ G).reshape(b.shape)

    return _record((A @ B).reshape(blocks * m, -1), (a, b), grad)


def block_tmatmul(a: Tensor, b: Tensor, blocks: int) -> Tensor:
    """Per-block ``a_k^T b_k`` of row-stacked matrices with equal block heights."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[0] % blocks:
        raise ContractError(f"block_tmatmul: shapes {a.shape} and {b.shape} do not split into {blocks} blocks")
    n = a.shape[0] // blocks
    A = a.data.reshape(blocks, n, a.shape[1])
    B = b.data.reshape(blocks, n, b.shape[1])

    def grad(g):
        G = g.reshape(blocks, a.shape[1], b.shape[1])
        return (B @ G.transpose(0, 2, 1)).reshape(a.shape), (A @ G).reshape(b.shape)

    return _record((A.transpose(0, 2, 1) @ B).reshape(blocks * a.shape[1], b.shape[1]), (a, b), grad)


# ----------------------------------------------------------------- optimisers


def _check_grads(params: Iterable[Tensor]) -> list[Tensor]:
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient; run backward first")
    return params


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    for p in _check_grads(params):
        p.data = p.data - lr * p.grad


class Adam:
    """Adam with bias correction. State is keyed by parameter position."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        _check_grads(self.params)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            self.m[i] = b1 * self.m[i] + (1 - b1) * p.grad
            self.v[i] = b2 * self.v[i] + (1 - b2) * p.grad * p.grad
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def adam_step(params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, state: Adam | None = None) -> Adam:
    """One Adam update; pass the returned state back in for later steps."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step()
    return state


# ----------------------------------------------------------------- checkpoints


def dumps_checkpoint(tensors: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> str:
    """JSON text mapping name -> {"shape", "data"}; an optional "meta" entry rides along."""
    out = {}
    if meta is not None:
        if "meta" in tensors:
            raise ContractError("'meta' is reserved in checkpoints")
        out["meta"] = meta
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError(f"checkpoint entry {name!r} holds non-finite values")
        out[name] = {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
    return json.dumps(out, sort_keys=True, separators=(",", ":"))


def loads_checkpoint(text: str | bytes) -> dict[str, np.ndarray]:
    raw = json.loads(text)
    out = {}
    for name, entry in raw.items():
        if name == "meta":
            continue
        try:
            out[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ContractError(f"bad checkpoint entry {name!r}: {exc}") from None
    return out


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray], meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_checkpoint(tensors, meta))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        return loads_checkpoint(fh.read())


# ------------------------------------------------------------ gradient checking


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def gradient_error(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, atol: float = 1e-7) -> float:
    """Worst elementwise relative error between analytic and numeric gradients.

    Differences below ``atol`` count as zero error.
    """
    for x in inputs:
        x.grad = None
    with Tape():
        loss = f()
    backward(loss)
    worst = 0.0
    for x in inputs:
        ana = np.zeros_like(x.data) if x.grad is None else x.grad
        num = numeric_grad(f, x, h)
        diff = np.abs(ana - num)
        scale = np.maximum(np.abs(ana), np.abs(num))
        rel = np.where(diff <= atol, 0.0, diff / np.maximum(scale, 1e-300))
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst
