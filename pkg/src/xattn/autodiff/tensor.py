"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Ops are recorded only while a Tape is active (``with Tape() as tape:``) and at
least one input requires grad; outside a tape every op is a plain numpy
computation. A tape may be replayed once: a second ``backward`` without
``reset`` raises ContractError. Leaf grads accumulate across tapes until
``zero_grad``.
"""

from __future__ import annotations
import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, ShapeError

_node_ids = itertools.count()
_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if any(d <= 0 for d in self.data.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.node_id = next(_node_ids)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """Ordered record of differentiable ops; inputs always precede outputs."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, entry: TapeEntry) -> None:
        if self._consumed:
            raise ContractError("cannot record on a tape that was already replayed")
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()
        self._consumed = False

    def leaves(self) -> List[Tensor]:
        produced = {e.output.node_id for e in self.entries}
        seen, out = set(), []
        for e in self.entries:
            for t in e.inputs:
                if t.requires_grad and t.node_id not in produced and t.node_id not in seen:
                    seen.add(t.node_id)
                    out.append(t)
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("tape already replayed; call reset() and rerun forward")
        self._consumed = True

        grads = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(entry.output.node_id, None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + gi
                else:
                    grads[inp.node_id] = gi

        for leaf in self.leaves():
            g = grads.get(leaf.node_id)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward called with no tape")
    tape.backward(loss)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, bw: Backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(TapeEntry(op, tuple(inputs), out, bw))
    return out


def _need_2d(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if t.data.ndim != 2:
            raise ShapeError(f"{op}: expected a matrix, got shape {t.shape}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(x: Tensor) -> Tensor:
    _need_2d("transpose", x)
    return _emit("transpose", (x,), x.data.T.copy(), lambda g: (g.T,))


def _blocks(op: str, x: Tensor, n_blocks: int) -> int:
    _need_2d(op, x)
    if n_blocks < 1 or x.shape[0] % n_blocks:
        raise ShapeError(f"{op}: {x.shape[0]} rows do not split into {n_blocks} blocks")
    return x.shape[0] // n_blocks


def block_scores(q: Tensor, k: Tensor, n_blocks: int = 1) -> Tensor:
    """
    Q K^T within row blocks: q and k are (n_blocks * L) x d stacks of
    per-sequence rows, the result is (n_blocks * L) x L.
    """
    L = _blocks("block_scores", q, n_blocks)
    _same_shape("block_scores", q, k)
    Q = q.data.reshape(n_blocks, L, -1)
    K = k.data.reshape(n_blocks, L, -1)
    q_shape, k_shape = q.shape, k.shape

    def bw(g):
        G = g.reshape(n_blocks, L, L)
        return np.matmul(G, K).reshape(q_shape), np.matmul(G.transpose(0, 2, 1), Q).reshape(k_shape)

    return _emit("block_scores", (q, k), np.matmul(Q, K.transpose(0, 2, 1)).reshape(n_blocks * L, L), bw)


def block_apply(p: Tensor, v: Tensor, n_blocks: int = 1) -> Tensor:
    """P V within row blocks: p is (n_blocks * L) x L, v is (n_blocks * L) x d."""
    L = _blocks("block_apply", v, n_blocks)
    if p.shape != (n_blocks * L, L):
        raise ShapeError(f"block_apply: weights {p.shape} do not fit values {v.shape}")
    P = p.data.reshape(n_blocks, L, L)
    V = v.data.reshape(n_blocks, L, -1)
    p_shape, v_shape = p.shape, v.shape

    def bw(g):
        G = g.reshape(n_blocks, L, -1)
        return np.matmul(G, V.transpose(0, 2, 1)).reshape(p_shape), np.matmul(P.transpose(0, 2, 1), G).reshape(v_shape)

    return _emit("block_apply", (p, v), np.matmul(P, V).reshape(v.shape), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add, the only broadcast supported."""
    _need_2d("add_bias", x)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")
    return _emit("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add_bias(matmul(x, w), b)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(shape, float(g)),))


# ---- elementwise nonlinearities -------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation used by BERT-style encoders."""
    X = x.data
    inner = _GELU_C * (X + 0.044715 * X**3)
    t = np.tanh(inner)
    y = 0.5 * X * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * d,)

    return _emit("gelu", (x,), y, bw)


# ---- normalization --------------------------------------------------------


def row_softmax(x: Tensor) -> Tensor:
    _need_2d("row_softmax", x)
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", (x,), p, bw)


def mixture_softmax(
    s: Tensor,
    m1: np.ndarray,
    s_cross: Optional[Tensor] = None,
    m2: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Row-normalized masked mixture of two score matrices:
        P = rownorm(M1 * exp(S - max) + M2 * exp(Sc - max))
    with one max per row taken over entries unmasked in either matrix.
    Masks are constants. With only ``s``/``m1`` this is a masked softmax.
    """
    _need_2d("mixture_softmax", s)
    m1 = np.asarray(m1, dtype=np.float64)
    if m1.shape != s.shape:
        raise ShapeError(f"mixture_softmax: mask {m1.shape} vs scores {s.shape}")
    live1 = m1 > 0
    if s_cross is not None:
        _same_shape("mixture_softmax", s, s_cross)
        m2 = np.asarray(m2, dtype=np.float64)
        if m2.shape != s.shape:
            raise ShapeError(f"mixture_softmax: mask {m2.shape} vs scores {s.shape}")
        live2 = m2 > 0
    else:
        live2 = np.zeros_like(live1)

    if not np.all((live1 | live2).any(axis=1)):
        raise ContractError("mixture_softmax: a row has no unmasked entry")

    row_max = np.where(live1, s.data, -np.inf).max(axis=1, keepdims=True)
    if s_cross is not None:
        row_max = np.maximum(
            row_max, np.where(live2, s_cross.data, -np.inf).max(axis=1, keepdims=True)
        )
    e1 = m1 * np.exp(np.where(live1, s.data - row_max, -np.inf))
    e2 = (
        m2 * np.exp(np.where(live2, s_cross.data - row_max, -np.inf))
        if s_cross is not None
        else None
    )
    total = e1 if e2 is None else e1 + e2
    z = total.sum(axis=1, keepdims=True)
    p = total / z
    p1 = e1 / z
    p2 = None if e2 is None else e2 / z

    def bw(g):
        centered = g - (g * p).sum(axis=1, keepdims=True)
        if p2 is None:
            return (p1 * centered,)
        return (p1 * centered, p2 * centered)

    inputs = (s,) if s_cross is None else (s, s_cross)
    return _emit("mixture_softmax", inputs, p, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    _need_2d("layer_norm", x)
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gamma.shape}/{beta.shape} vs rows {x.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    G = gamma.data

    def bw(g):
        dxhat = g * G
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit("layer_norm", (x, gamma, beta), xhat * G + beta.data, bw)


# ---- indexing -------------------------------------------------------------


def take_rows(table: Tensor, idx: Sequence[int]) -> Tensor:
    _need_2d("take_rows", table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", (table,), table.data[idx], bw)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _need_2d("slice_cols", x)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _emit("slice_cols", (x,), x.data[:, start:stop].copy(), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    _need_2d("concat_cols", *parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_cols", tuple(parts), np.concatenate([p.data for p in parts], axis=1), bw)


# ---- loss -----------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax(logits)[label]."""
    _need_2d("cross_entropy", logits)
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label out of range [0, {c})")
    X = logits.data
    m = X.max(axis=1, keepdims=True)
    e = np.exp(X - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - X[rows, labels])
    probs = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / b),)

    return _emit("cross_entropy", (logits,), np.array(loss), bw)


def token_nll(logits: Tensor, targets: Sequence[int]) -> np.ndarray:
    """Per-row negative log-likelihoods, no tape; used for perplexity dumps."""
    X = logits.data
    m = X.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(X - m).sum(axis=1))
    t = np.asarray(targets, dtype=np.int64)
    return lse - X[np.arange(X.shape[0]), t]
