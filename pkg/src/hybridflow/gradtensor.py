"""Minimal dense-array engine with reverse-mode differentiation.

Values are float64 numpy arrays wrapped in :class:`Tensor`. Operations run
eagerly; when a :class:`Tape` is active and at least one input requires a
gradient, the operation is appended to the tape together with a closure that
maps the output cotangent to input cotangents. Outside a tape the same code
paths are plain numpy evaluation, which is what inference uses.

    >>> w = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(mul(w, w))
    >>> tape.backward(loss, [w])[w.node_id]
    array([ 2., -4.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "op_apply",
    "backward",
    "grad_check",
    "adam_init",
    "adam_step",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "concat_last_axis",
    "slice_last_axis",
    "permute_last_axis",
    "masked_linear",
    "detach",
]

_ids = itertools.count()
_state = threading.local()


class Tensor:
    """Dense float64 array participating in a recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Contiguous flat view of the data."""
        return np.ascontiguousarray(self.data).reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; all of these dispatch to the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; tapes nest, and only the innermost active tape
    records. A tape is single-use per training step, which keeps gradients of
    different steps isolated.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns a map ``node_id -> gradient`` for every tensor that received a
        cotangent. When ``params`` is given each one also gets ``.grad`` set;
        parameters the loss does not reach get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.get(rec.out.node_id)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = gi if prev is None else prev + gi
        if params is not None:
            for p in params:
                g = grads.get(p.node_id)
                if g is None:
                    g = np.zeros_like(p.data)
                    grads[p.node_id] = g
                p.grad = g
        return grads


def _stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor, params: Iterable[Tensor] | None = None, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Run the reverse sweep on ``tape`` (default: the innermost active tape)."""
    tape = tape or _active_tape()
    if tape is None:
        raise RuntimeError("backward: no tape recorded this loss")
    return tape.backward(loss, params)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, inputs, bwd))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _broadcast_check("mul", a, b)
    A, B = a.data, b.data
    return _emit(A * B, (a, b), lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def neg(a) -> Tensor:
    a = _t(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input contains non-positive values")
    A = a.data
    return _emit(np.log(A), (a,), lambda g: (g / A,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    """Rectifier; the subgradient at exactly zero is taken as 0."""
    a = _t(a)
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _t(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _t(a)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis)), (a,), bwd)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _t(a)
    shape = a.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.full(shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit(np.asarray(a.data.mean(axis=axis)), (a,), bwd)


def concat_last_axis(tensors: Sequence) -> Tensor:
    ts = tuple(_t(t) for t in tensors)
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ValueError(f"concat_last_axis: leading shapes differ: {[t.shape for t in ts]}")
    edges = np.cumsum([0] + [t.shape[-1] for t in ts])
    out = np.concatenate([t.data for t in ts], axis=-1)
    return _emit(out, ts, lambda g: tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(ts))))


def slice_last_axis(a, start: int, stop: int) -> Tensor:
    a = _t(a)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _emit(a.data[..., start:stop], (a,), bwd)


def permute_last_axis(a, perm) -> Tensor:
    """Reorder the last axis: ``out[..., i] = a[..., perm[i]]``."""
    a = _t(a)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(a.shape[-1])):
        raise ValueError(f"permute_last_axis: {perm.tolist()} is not a permutation of {a.shape[-1]} entries")

    def bwd(g):
        full = np.empty_like(g)
        full[..., perm] = g
        return (full,)

    return _emit(a.data[..., perm], (a,), bwd)


def masked_linear(x, W, M=None, b=None) -> Tensor:
    """``x @ (W * M).T + b`` with ``W`` and ``M`` shaped (out, in).

    ``M`` is a constant 0/1 array; ``None`` means dense. ``b`` may be omitted.
    """
    x, W = _t(x), _t(W)
    if M is not None:
        M = np.asarray(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
        if M.shape != W.shape:
            raise ValueError(f"masked_linear: mask shape {M.shape} does not match weight shape {W.shape}")
    if x.data.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"masked_linear: input shape {x.shape} incompatible with weight shape {W.shape}")
    Weff = W.data if M is None else W.data * M
    X = x.data
    out = X @ Weff.T
    if b is not None:
        b = _t(b)
        if b.shape != (W.shape[0],):
            raise ValueError(f"masked_linear: bias shape {b.shape} does not match weight shape {W.shape}")
        out = out + b.data
        inputs = (x, W, b)
    else:
        inputs = (x, W)

    def bwd(g):
        gW = g.T @ X
        if M is not None:
            gW = gW * M
        grads = [g @ Weff, gW]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit(out, inputs, bwd)


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(_t(a).data)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "concat_last_axis": lambda *ts: concat_last_axis(ts),
    "masked_linear": masked_linear,
    "clip": clip,
    "slice_last_axis": slice_last_axis,
    "permute_last_axis": permute_last_axis,
}


def op_apply(kind: str, inputs: Sequence, **static) -> Tensor:
    """Apply operation ``kind`` by name, e.g. ``op_apply("matmul", [a, b])``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **static)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5, skip: Iterable[int] = ()) -> float:
    """Max relative error between taped and central-difference gradients.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must be deterministic. Coordinates sitting on a kink of a piecewise
    op (relu at 0, clip at a bound) have no derivative and must be excluded
    through ``skip`` (flat indices).
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    base = np.array(_t(point).data, dtype=np.float64)
    p = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(p)
    analytic = tape.backward(loss, [p])[p.node_id].reshape(-1)
    skipped = set(skip)
    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        if i in skipped:
            continue
        hi, lo = flat.copy(), flat.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        f_hi = float(f(Tensor(hi.reshape(base.shape))).data)
        f_lo = float(f(Tensor(lo.reshape(base.shape))).data)
        numeric = (f_hi - f_lo) / (2.0 * epsilon)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_init(params: Sequence[Tensor], lr: float, weight_decay: float = 0.0, **kw) -> AdamState:
    return AdamState(
        lr=lr,
        weight_decay=weight_decay,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        **kw,
    )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    Weight decay is decoupled: ``p -= lr * wd * p`` runs before the moment
    update. Raises ``FloatingPointError`` if any gradient is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: params, grads and state are misaligned")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"adam_step: gradient {i} has shape {g.shape}, parameter has {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {i} at step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
