"""Dense tensors with reverse-mode gradients for the kernels the model uses.

Only the handful of operations needed by the relation extractor live here:
matrix products, same-padded 1-D convolution, piecewise max pooling, softmax,
a fused negative log-likelihood, activations and some shape glue.  Every
differentiable op records a closure that pushes its output gradient back to
its parents; ``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad=False, parents=(), op="", dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        order = _topo_order(self)
        # intermediate grads are scratch space; leaves keep accumulating
        for node in order:
            if node._parents:
                node.grad = None
        if seed is None:
            seed = np.ones_like(self.values)
        self.accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(values, parents, op):
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, parents=parents if needs else (), op=op)


# ---------------------------------------------------------------- kernels

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = _result(a.values @ b.values, (a, b), "matmul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate(g @ b.values.T)
            if b.requires_grad:
                b.accumulate(a.values.T @ g)
        out._backward = backward
    return out


def conv1d_same(seq: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded convolution over time; output has the same length as ``seq``.

    ``filters`` is laid out (width, d_in, d_out).
    """
    w, d_in, d_out = filters.shape
    if w % 2 == 0:
        raise ConfigError(f"conv1d_same needs an odd kernel width, got {w}")
    T = seq.shape[0]
    if seq.values.ndim != 2 or seq.shape[1] != d_in:
        raise DimensionError(f"conv1d_same: input {seq.shape} does not match filters {filters.shape}")
    if bias.shape != (d_out,):
        raise DimensionError(f"conv1d_same: bias {bias.shape} does not match filters {filters.shape}")
    if T < 1:
        raise DimensionError("conv1d_same: empty sequence")
    half = (w - 1) // 2
    padded = np.zeros((T + 2 * half, d_in), dtype=seq.values.dtype)
    padded[half:half + T] = seq.values
    # cols[t] = [x_{t-half}; ...; x_{t+half}]
    cols = np.concatenate([padded[o:o + T] for o in range(w)], axis=1)
    flat = filters.values.reshape(w * d_in, d_out)
    out = _result(cols @ flat + bias.values, (seq, filters, bias), "conv1d_same")
    if out.requires_grad:
        def backward(g):
            if filters.requires_grad:
                filters.accumulate((cols.T @ g).reshape(filters.shape))
            if bias.requires_grad:
                bias.accumulate(g.sum(axis=0))
            if seq.requires_grad:
                dcols = g @ flat.T
                dpad = np.zeros_like(padded)
                for o in range(w):
                    dpad[o:o + T] += dcols[:, o * d_in:(o + 1) * d_in]
                seq.accumulate(dpad[half:half + T])
        out._backward = backward
    return out


def piecewise_max_pool(featmap: Tensor, split1: int, split2: int) -> Tensor:
    """Max over rows [0..split1], (split1..split2], (split2..T-1], concatenated.

    Empty segments contribute zeros. Ties go to the lowest row.
    """
    T, C = featmap.shape
    if not (0 <= split1 <= split2 < T):
        raise IndexError(f"piecewise_max_pool: splits ({split1}, {split2}) invalid for length {T}")
    bounds = [(0, split1 + 1), (split1 + 1, split2 + 1), (split2 + 1, T)]
    vals = np.zeros(3 * C, dtype=featmap.values.dtype)
    picks = []
    for s, (lo, hi) in enumerate(bounds):
        if hi <= lo:
            picks.append(None)
            continue
        seg = featmap.values[lo:hi]
        rows = lo + np.argmax(seg, axis=0)
        vals[s * C:(s + 1) * C] = featmap.values[rows, np.arange(C)]
        picks.append(rows)
    out = _result(vals, (featmap,), "piecewise_max_pool")
    if out.requires_grad:
        def backward(g):
            d = np.zeros_like(featmap.values)
            cols = np.arange(C)
            for s, rows in enumerate(picks):
                if rows is not None:
                    # each (row, channel) pair is unique within a segment
                    d[rows, cols] += g[s * C:(s + 1) * C]
            featmap.accumulate(d)
        out._backward = backward
    return out


def softmax_row(logits: Tensor) -> Tensor:
    """Softmax along the last axis, max-shifted."""
    x = logits.values
    if x.shape[-1] < 1:
        raise DimensionError("softmax_row: empty input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    out = _result(p, (logits,), "softmax_row")
    if out.requires_grad:
        def backward(g):
            logits.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))
        out._backward = backward
    return out


def nll_from_logits(logits: Tensor, gold: int) -> Tensor:
    x = logits.values
    if x.ndim != 1:
        raise DimensionError(f"nll_from_logits expects a vector, got {x.shape}")
    k = x.shape[0]
    if not 0 <= gold < k:
        raise IndexError(f"gold index {gold} out of range for {k} logits")
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = _result(np.asarray(lse - x[gold]), (logits,), "nll")
    if out.requires_grad:
        def backward(g):
            d = np.exp(x - lse)
            d[gold] -= 1.0
            logits.accumulate(g * d)
        out._backward = backward
    return out


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    out = _result(y, (x,), "tanh")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(g * (1.0 - y * y))
    return out


def relu_act(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = _result(np.where(mask, x.values, 0.0), (x,), "relu")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(g * mask)
    return out


ACTIVATIONS = {"tanh": tanh_act, "relu": relu_act}


def activation(name: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------- glue ops

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast along leading axes of ``a``."""
    out = _result(a.values + b.values, (a, b), "add")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b.accumulate(_unbroadcast(g, b.shape))
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = _result(a.values * b.values, (a, b), "mul")
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                a.accumulate(g * b.values)
            if b.requires_grad:
                b.accumulate(g * a.values)
        out._backward = backward
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _result(x.values * c, (x,), "scale")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(g * c)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.asarray(x.values.sum()), (x,), "sum")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(np.broadcast_to(g, x.shape))
    return out


def transpose(x: Tensor) -> Tensor:
    out = _result(x.values.T, (x,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(g.T)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = _result(x.values.reshape(shape), (x,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: x.accumulate(g.reshape(x.shape))
    return out


def lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; backward scatter-adds into the looked-up rows."""
    ids = np.asarray(ids, dtype=np.intp)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"lookup: id out of range for table with {n} rows")
    out = _result(table.values[ids], (table,), "lookup")
    if out.requires_grad:
        def backward(g):
            d = np.zeros_like(table.values)
            np.add.at(d, ids, g)
            table.accumulate(d)
        out._backward = backward
    return out


def row(x: Tensor, i: int) -> Tensor:
    out = _result(x.values[i], (x,), "row")
    if out.requires_grad:
        def backward(g):
            d = np.zeros_like(x.values)
            d[i] = g
            x.accumulate(d)
        out._backward = backward
    return out


def concat(parts: Sequence[Tensor], axis=-1) -> Tensor:
    vals = np.concatenate([p.values for p in parts], axis=axis)
    out = _result(vals, tuple(parts), "concat")
    if out.requires_grad:
        edges = np.cumsum([p.shape[axis] for p in parts])[:-1]
        def backward(g):
            for p, piece in zip(parts, np.split(g, edges, axis=axis)):
                if p.requires_grad:
                    p.accumulate(piece)
        out._backward = backward
    return out


def stack(parts: Sequence[Tensor]) -> Tensor:
    out = _result(np.stack([p.values for p in parts]), tuple(parts), "stack")
    if out.requires_grad:
        def backward(g):
            for p, piece in zip(parts, g):
                if p.requires_grad:
                    p.accumulate(piece)
        out._backward = backward
    return out


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(fn, inputs: Sequence[Tensor], tolerance=1e-4, step=1e-5, op_name=None) -> GradCheckReport:
    """Compare analytic gradients of ``sum(fn(*inputs))`` with central differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8); the report
    carries the worst one over all inputs that require gradients.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    sum_all(fn(*inputs)).backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def f():
        return float(np.sum(fn(*inputs).values))

    worst = 0.0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        if a is None:
            a = np.zeros_like(t.values)
        flat = t.values.reshape(-1)
        a = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
            worst = max(worst, err)
    name = op_name or getattr(fn, "__name__", "op")
    return GradCheckReport(name, worst, tolerance, worst <= tolerance)
