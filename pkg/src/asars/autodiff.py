"""Tape-based reverse-mode autodiff over dense numpy arrays.

A :class:`Graph` records every operation applied to :class:`Tensor` values in
insertion order; :meth:`Graph.backward` walks the tape in reverse.  Only the
primitives needed by the recommender model are provided.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Graph",
    "Tensor",
    "get_precision",
    "grad_check",
    "precision",
    "set_precision",
]

_state = threading.local()
_DTYPES = {"float32": np.float32, "float64": np.float64}


class DimensionError(ValueError):
    pass


def get_precision() -> np.dtype:
    return np.dtype(getattr(_state, "dtype", np.float32))


def set_precision(mode: str) -> None:
    """Set the engine precision for the current thread ("float32" or "float64")."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}")
    _state.dtype = _DTYPES[mode]


@contextlib.contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        _state.dtype = old.type


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_precision())
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Append-only operation tape.

    With ``record=False`` ops only compute forward values (no tape, outputs never
    require grad); this is what evaluation and finite-difference probes use.
    ``macs`` counts multiply-accumulates issued by matmul/einsum.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.dtype = get_precision()
        self.nodes: list[_Node] = []
        self.macs = 0
        self._consumed = False

    def reset(self) -> None:
        self.nodes.clear()
        self.macs = 0
        self._consumed = False

    # -- plumbing -------------------------------------------------------
    def _check(self, *tensors: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("graph already ran backward; call reset() first")
        for t in tensors:
            if t.data.dtype != self.dtype:
                raise TypeError(
                    f"tensor dtype {t.data.dtype} does not match graph precision {self.dtype}"
                )

    def const(self, data) -> Tensor:
        return Tensor._wrap(np.asarray(data, dtype=self.dtype), False)

    def _emit(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward) -> Tensor:
        needs = self.record and any(t.requires_grad for t in inputs)
        res = Tensor._wrap(out, needs)
        if needs:
            self.nodes.append(_Node(op, tuple(inputs), res, backward))
        return res

    @staticmethod
    def _acc(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.data.shape)
        else:
            t.grad += g.reshape(t.data.shape)

    # -- linear algebra -------------------------------------------------
    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        self.macs += a.shape[0] * a.shape[1] * b.shape[1]
        out = a.data @ b.data

        def backward(gout):
            self._acc(a, gout @ b.data.T)
            self._acc(b, a.data.T @ gout)

        return self._emit("matmul", (a, b), out, backward)

    def einsum(self, spec: str, a: Tensor, b: Tensor) -> Tensor:
        """Two-operand einsum.  Every index of an operand must appear in the
        other operand or in the output (no operand-local reductions)."""
        self._check(a, b)
        ins, out_idx = spec.replace(" ", "").split("->")
        ia, ib = ins.split(",")
        if len(ia) != a.data.ndim or len(ib) != b.data.ndim:
            raise DimensionError(f"einsum {spec!r} does not fit shapes {a.shape}, {b.shape}")
        sizes: dict[str, int] = {}
        for idx, shape in ((ia, a.shape), (ib, b.shape)):
            for ch, n in zip(idx, shape):
                if sizes.setdefault(ch, n) != n:
                    raise DimensionError(f"einsum {spec!r}: index {ch} mismatch for {a.shape}, {b.shape}")
        for ch in ia:
            if ch not in ib and ch not in out_idx:
                raise ValueError(f"einsum {spec!r}: operand-local reduction over {ch!r}")
        for ch in ib:
            if ch not in ia and ch not in out_idx:
                raise ValueError(f"einsum {spec!r}: operand-local reduction over {ch!r}")
        self.macs += math.prod(sizes.values())
        out = np.einsum(spec, a.data, b.data, optimize=True)

        def backward(gout):
            if a.requires_grad:
                self._acc(a, np.einsum(f"{out_idx},{ib}->{ia}", gout, b.data, optimize=True))
            if b.requires_grad:
                self._acc(b, np.einsum(f"{out_idx},{ia}->{ib}", gout, a.data, optimize=True))

        return self._emit("einsum", (a, b), out, backward)

    def transpose(self, a: Tensor) -> Tensor:
        self._check(a)
        if a.data.ndim != 2:
            raise DimensionError(f"transpose expects 2-d, got {a.shape}")

        def backward(gout):
            self._acc(a, gout.T)

        return self._emit("transpose", (a,), a.data.T, backward)

    # -- elementwise ----------------------------------------------------
    def _binary_shape(self, op, a: Tensor, b: Tensor):
        try:
            return np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        self._binary_shape("add", a, b)

        def backward(gout):
            self._acc(a, _unbroadcast(gout, a.shape))
            self._acc(b, _unbroadcast(gout, b.shape))

        return self._emit("add", (a, b), a.data + b.data, backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        self._binary_shape("sub", a, b)

        def backward(gout):
            self._acc(a, _unbroadcast(gout, a.shape))
            self._acc(b, _unbroadcast(-gout, b.shape))

        return self._emit("sub", (a, b), a.data - b.data, backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check(a, b)
        self._binary_shape("mul", a, b)

        def backward(gout):
            if a.requires_grad:
                self._acc(a, _unbroadcast(gout * b.data, a.shape))
            if b.requires_grad:
                self._acc(b, _unbroadcast(gout * a.data, b.shape))

        return self._emit("mul", (a, b), a.data * b.data, backward)

    def scale(self, a: Tensor, c: float) -> Tensor:
        self._check(a)
        c = self.dtype.type(c)

        def backward(gout):
            self._acc(a, gout * c)

        return self._emit("scale", (a,), a.data * c, backward)

    def tanh(self, a: Tensor) -> Tensor:
        self._check(a)
        y = np.tanh(a.data)

        def backward(gout):
            self._acc(a, gout * (1.0 - y * y))

        return self._emit("tanh", (a,), y, backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        self._check(a)
        y = _stable_sigmoid(a.data)

        def backward(gout):
            self._acc(a, gout * y * (1.0 - y))

        return self._emit("sigmoid", (a,), y, backward)

    def log_sigmoid(self, a: Tensor) -> Tensor:
        self._check(a)
        x = a.data
        # log(sigmoid(x)) = -softplus(-x) = min(x, 0) - log1p(exp(-|x|))
        y = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))

        def backward(gout):
            self._acc(a, gout * _stable_sigmoid(-x))

        return self._emit("log_sigmoid", (a,), y, backward)

    def relu(self, a: Tensor) -> Tensor:
        self._check(a)
        on = a.data > 0

        def backward(gout):
            self._acc(a, gout * on)

        return self._emit("relu", (a,), np.where(on, a.data, 0).astype(self.dtype), backward)

    def dropout(self, a: Tensor, p: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
        """Inverted dropout: kept units are scaled by 1/(1-p)."""
        self._check(a)
        if not train or p == 0.0:
            return a
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        keep = (rng.random(a.shape) >= p).astype(self.dtype) / self.dtype.type(1.0 - p)

        def backward(gout):
            self._acc(a, gout * keep)

        return self._emit("dropout", (a,), a.data * keep, backward)

    # -- reductions and shape -------------------------------------------
    def sum(self, a: Tensor, axis: int | None = None) -> Tensor:
        self._check(a)
        out = np.asarray(a.data.sum(axis=axis), dtype=self.dtype)

        def backward(gout):
            g = gout if axis is None else np.expand_dims(gout, axis)
            self._acc(a, np.broadcast_to(g, a.shape))

        return self._emit("sum", (a,), out, backward)

    def mean(self, a: Tensor) -> Tensor:
        return self.scale(self.sum(a), 1.0 / a.data.size)

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        self._check(a)
        out = a.data.reshape(shape)

        def backward(gout):
            self._acc(a, gout.reshape(a.shape))

        return self._emit("reshape", (a,), out, backward)

    def broadcast_to(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        self._check(a)
        try:
            out = np.broadcast_to(a.data, shape)
        except ValueError:
            raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None

        def backward(gout):
            self._acc(a, _unbroadcast(gout, a.shape))

        return self._emit("broadcast_to", (a,), out, backward)

    def concat(self, parts: Sequence[Tensor], axis: int = -1) -> Tensor:
        self._check(*parts)
        try:
            out = np.concatenate([p.data for p in parts], axis=axis)
        except ValueError:
            raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}") from None
        bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

        def backward(gout):
            for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                if p.requires_grad:
                    idx = [slice(None)] * gout.ndim
                    idx[axis] = slice(lo, hi)
                    self._acc(p, gout[tuple(idx)])

        return self._emit("concat", tuple(parts), out, backward)

    def stack(self, parts: Sequence[Tensor], axis: int = 0) -> Tensor:
        self._check(*parts)
        shapes = {p.shape for p in parts}
        if len(shapes) != 1:
            raise DimensionError(f"stack shape mismatch: {sorted(shapes)}")
        out = np.stack([p.data for p in parts], axis=axis)

        def backward(gout):
            for i, p in enumerate(parts):
                if p.requires_grad:
                    self._acc(p, np.take(gout, i, axis=axis))

        return self._emit("stack", tuple(parts), out, backward)

    def slice(self, a: Tensor, axis: int, start: int, stop: int | None = None) -> Tensor:
        """``a[..., start:stop, ...]`` along ``axis``; ``stop=None`` selects the
        single index ``start`` and drops the axis."""
        self._check(a)
        idx: list = [slice(None)] * a.data.ndim
        idx[axis] = start if stop is None else slice(start, stop)
        idx = tuple(idx)
        out = a.data[idx]

        def backward(gout):
            g = np.zeros(a.shape, dtype=self.dtype)
            g[idx] = gout
            self._acc(a, g)

        return self._emit("slice", (a,), out, backward)

    def embedding(self, table: Tensor, ids, name: str | None = None) -> Tensor:
        """Gather rows of ``table`` (first axis); duplicate ids accumulate."""
        self._check(table)
        ids = np.asarray(ids, dtype=np.int64)
        n = table.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            bad = ids[(ids < 0) | (ids >= n)][0]
            raise IndexError(f"id {bad} out of range for table {name or table.name or '?'} with {n} rows")
        out = table.data[ids]

        def backward(gout):
            g = np.zeros(table.shape, dtype=self.dtype)
            np.add.at(g, ids, gout)
            self._acc(table, g)

        return self._emit("embedding", (table,), out, backward)

    # -- attention ------------------------------------------------------
    def masked_softmax(self, scores: Tensor, mask: np.ndarray, zero_fill: bool = False) -> Tensor:
        """Softmax over the last axis restricted to ``mask``; masked entries are 0.

        With ``zero_fill`` masked scores are replaced by literal zeros and take
        part in the normalisation (ablation of the masking rule)."""
        self._check(scores)
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if zero_fill:
            x = np.where(mask, scores.data, 0)
            keep = np.ones_like(mask)
        else:
            if not mask.any(axis=-1).all():
                raise ValueError("masked_softmax: every row needs at least one valid entry")
            x = np.where(mask, scores.data, -np.inf)
            keep = mask
        x = x - x.max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(x), 0)
        y = (e / e.sum(axis=-1, keepdims=True)).astype(self.dtype)

        def backward(gout):
            g = y * (gout - (gout * y).sum(axis=-1, keepdims=True))
            if zero_fill:
                g = np.where(mask, g, 0)
            self._acc(scores, g)

        return self._emit("masked_softmax", (scores,), y, backward)

    def masked_softmax_rows(self, scores: Tensor, valid_len: Sequence[int], zero_fill: bool = False) -> Tensor:
        """Row ``i`` is a softmax over its first ``valid_len[i]`` entries."""
        if scores.data.ndim != 2:
            raise DimensionError(f"masked_softmax_rows expects a matrix, got {scores.shape}")
        n_rows, n_cols = scores.shape
        valid_len = np.asarray(valid_len, dtype=np.int64)
        if valid_len.shape != (n_rows,):
            raise DimensionError(f"valid_len has {valid_len.shape} entries for {n_rows} rows")
        if valid_len.size and (valid_len.min() < 1 or valid_len.max() > n_cols):
            raise ValueError(f"valid_len entries must lie in [1, {n_cols}]")
        mask = np.arange(n_cols)[None, :] < valid_len[:, None]
        return self.masked_softmax(scores, mask, zero_fill=zero_fill)

    # -- backward -------------------------------------------------------
    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise RuntimeError("graph already ran backward; call reset() first")
        if not loss.requires_grad:
            self._consumed = True
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = node.output.grad
            if gout is None:
                continue
            node.backward(gout)
            node.output.grad = None if node.output is not loss else node.output.grad
        self._consumed = True


def grad_check(
    build: Callable[[Graph], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``build(graph)`` must deterministically produce a scalar loss from the
    current values of ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    plist = list(params.values()) if isinstance(params, dict) else list(params)
    for p in plist:
        p.grad = None
    g = Graph()
    loss = build(g)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    g.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]

    def f() -> float:
        val = float(build(Graph(record=False)).data)
        if not math.isfinite(val):
            raise FloatingPointError("grad_check: non-finite loss")
        return val

    worst = 0.0
    for p, ga in zip(plist, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num))
            worst = max(worst, err)
    return worst
