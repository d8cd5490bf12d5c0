"""A small reverse-mode autodiff tape over numpy arrays.

Only the operations the recommender models need are provided.  Operations
record themselves on the active :class:`Tape`; outside a tape they simply
compute values, which is what scoring and evaluation use.

    >>> x = Parameter(np.array([1.0, 2.0]))
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import json
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import sparse

DTYPE = np.float32


class NumericError(FloatingPointError):
    """A NaN or infinity showed up in values or gradients."""


class ShapeError(ValueError):
    pass


class Tensor:
    """Array value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


def Parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


_state = threading.local()


def _active() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Records operations for one forward pass; ``backward`` replays them in reverse."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._live: set[int] = set()  # ids of recorded outputs (records keep them alive)
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = _active()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._live

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
        """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter.

        Tensors in ``params`` that the loss does not reach get a zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if not self.tracks(inp):
                    continue
                if inp.requires_grad:
                    leaves[id(inp)] = inp
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        for key, leaf in leaves.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {leaf!r}")
            leaf._accumulate(g.astype(leaf.data.dtype, copy=False))
        for p in params or ():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        self.records.clear()
        self._live.clear()


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"non-finite value produced (shape {out.shape})")
    tape = _active()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.records.append((out, inputs, backward_fn))
        tape._live.add(id(out))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _check(cond: bool, op: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


# -- forward ops ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g))
    _check(a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1], "add", a.shape, b.shape)
    return _record(Tensor(a.data + b.data), (a, b), lambda g: (g, g.sum(axis=0)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return _record(Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, "mul", a.shape, b.shape)
    return _record(Tensor(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(Tensor(a.data * c), (a,), lambda g: (g * c,))


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    shapes = [t.shape for t in tensors]
    _check(len({s[:axis] + s[axis + 1:] for s in shapes}) == 1, "concat", *shapes)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(out, tuple(tensors), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record(Tensor(a.data * mask), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(Tensor(s), (a,), lambda g: (g * s * (1 - s),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _record(Tensor(out), (a,), lambda g: (g * _sigmoid(x),))


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape and a.data.ndim == 2, "dot_rows", a.shape, b.shape)
    out = Tensor(np.einsum("ij,ij->i", a.data, b.data))
    return _record(out, (a, b), lambda g: (g[:, None] * b.data, g[:, None] * a.data))


def gather_rows(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for table with {n} rows")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(Tensor(table.data[idx]), (table,), back)


def reshape(a: Tensor, shape) -> Tensor:
    return _record(Tensor(a.data.reshape(shape)), (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a: Tensor) -> Tensor:
    return _record(Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype).reshape(())),
                   (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.data.size, 1))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def stack_rows_mean(tensors: list[Tensor]) -> Tensor:
    """Elementwise mean of same-shape tensors."""
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return scale(out, 1.0 / len(tensors))


# -- sparse graph -------------------------------------------------------------

@dataclass
class SparseAdjacency:
    """Symmetric normalized user-item graph on ``num_users + num_items`` nodes.

    Users occupy rows ``[0, num_users)``; items follow.  Edge weights are
    ``1 / sqrt(deg_u * deg_i)``.
    """

    matrix: sparse.csr_matrix
    degree: np.ndarray
    num_users: int
    num_items: int

    @classmethod
    def from_pairs(cls, users, items, num_users: int, num_items: int, dtype=DTYPE) -> "SparseAdjacency":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        key = np.unique(users * num_items + items)
        users, items = key // num_items, key % num_items
        n = num_users + num_items
        rows = np.concatenate([users, items + num_users])
        cols = np.concatenate([items + num_users, users])
        A = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        deg = np.asarray(A.sum(axis=1)).ravel()
        inv = np.zeros_like(deg)
        nz = deg > 0
        inv[nz] = 1.0 / np.sqrt(deg[nz])
        norm = sparse.diags(inv) @ A @ sparse.diags(inv)
        return cls(norm.tocsr().astype(dtype), deg, num_users, num_items)


def sparse_propagate(adj: SparseAdjacency | sparse.spmatrix, emb: Tensor) -> Tensor:
    """One propagation step ``A @ E``; the adjoint is ``A.T @ g`` (A is symmetric)."""
    A = adj.matrix if isinstance(adj, SparseAdjacency) else adj
    _check(A.shape[1] == emb.shape[0], "sparse_propagate", A.shape, emb.shape)
    out = Tensor(np.asarray(A @ emb.data, dtype=emb.data.dtype))
    return _record(out, (emb,), lambda g: (np.asarray(A.T @ g, dtype=emb.data.dtype),))


# -- parameters and optimizers -----------------------------------------------

class ParameterStore(OrderedDict):
    """Named trainable tensors plus optimizer moments."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.opt_state: dict[str, dict] = {}
        self.step_count = 0

    def add(self, name: str, value) -> Tensor:
        t = Parameter(value, name=name)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, arr in snap.items():
            self[k].data = arr.copy()


@dataclass
class OptimizerConfig:
    algo: str = "adam"
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def optimizer_step(store: ParameterStore, config: OptimizerConfig) -> None:
    """Update every parameter holding a gradient in place, then clear gradients."""
    for name, p in store.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name!r} at optimizer step {store.step_count}")
    store.step_count += 1
    t = store.step_count
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if config.algo == "sgd":
            p.data -= (config.lr * g).astype(p.data.dtype)
        elif config.algo == "adam":
            st = store.opt_state.setdefault(name, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)})
            b1, b2 = config.betas
            st["m"] *= b1
            st["m"] += (1 - b1) * g
            st["v"] *= b2
            st["v"] += (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** t)
            vhat = st["v"] / (1 - b2 ** t)
            p.data -= (config.lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.data.dtype)
        else:
            raise ValueError(f"unknown optimizer {config.algo!r}")
        p.grad = None


def l2_penalty(tensors: Iterable[Tensor], lam: float) -> Tensor:
    """``lam`` times the summed squares of ``tensors`` (pass gathered rows for embeddings)."""
    tensors = list(tensors)
    if lam == 0 or not tensors:
        return Tensor(np.zeros((), dtype=DTYPE))
    total = sum_all(square(tensors[0]))
    for t in tensors[1:]:
        total = add(total, sum_all(square(t)))
    return scale(total, lam)


# -- checkpoints ------------------------------------------------------------

_CKPT_MAGIC = b"PPCK"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParameterStore, *, d: int, num_users: int, num_items: int,
                    kind: str, meta: dict | None = None) -> None:
    """Header (magic, version, d, users, items, kind, JSON meta) then each parameter as
    length-prefixed UTF-8 name, ndim + dims, and little-endian f32 payload."""
    def lp(b: bytes) -> bytes:
        return struct.pack("<I", len(b)) + b

    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IIII", _CKPT_VERSION, d, num_users, num_items))
        fh.write(lp(kind.encode()))
        fh.write(lp(json.dumps(meta or {}, sort_keys=True).encode()))
        fh.write(struct.pack("<I", len(store)))
        for name, p in store.items():
            fh.write(lp(name.encode()))
            fh.write(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, d, nu, ni = struct.unpack_from("<IIII", buf, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20

    def read_lp():
        nonlocal off
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        s = buf[off:off + n]
        off += n
        return s

    kind = read_lp().decode()
    meta = json.loads(read_lp().decode())
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    store = ParameterStore()
    for _ in range(count):
        name = read_lp().decode()
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
        store.add(name, arr)
    header = {"d": d, "num_users": nu, "num_items": ni, "kind": kind, "meta": meta}
    return store, header
