"""Small dense-tensor library with tape-based reverse-mode differentiation.

Only the operators needed by the encoder and the CTC head are provided. Time
is always the second-to-last axis, features the last, so ``(T, D)`` and
``(B, T, D)`` arrays go through the same code path.

A :class:`Tape` must be active for operations to be recorded::

    with Tape() as tape:
        y = matmul(x, w)
        loss = sum_all(y)
    grads = backprop(loss, tape)

Outside a tape, operations just compute values.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError", "Tensor", "Tape", "tensor", "parameter", "backprop", "finite_diff_grad",
    "matmul", "add", "mul", "mul_scalar", "conv1d", "gelu", "layer_norm", "log_softmax",
    "softmax", "embed_lookup", "dropout_mask", "concat_time", "slice_time", "repeat_time",
    "reshape", "transpose", "sum_all", "custom_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operator."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """Immutable array value plus a flag saying whether gradients flow to it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


def tensor(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


@dataclass
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable  # grad_out -> tuple of grads (None where not needed)


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations, innermost-active per thread."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.nodes.append(Node(kind, tuple(inputs), out, backward))
    return out


def custom_op(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    """Register an operator defined elsewhere (e.g. the CTC loss) on the active tape."""
    return _record(kind, inputs, out_data, backward)


def backprop(loss: Tensor, tape: Tape) -> dict:
    """Return ``{leaf tensor: gradient array}`` for every requires_grad leaf reached."""
    if loss.data.size != 1:
        raise ShapeError("backprop", loss.shape, detail="loss must be a scalar")
    if not tape.nodes:
        raise ValueError("backprop: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    return {leaves[k]: g for k, g in grads.items() if k in leaves and k not in produced}


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)
    return _record("add", (a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _record("mul", (a, b), out, backward)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)
    return _record("mul_scalar", (a,), out, lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th ** 2) * dinner),)
    return _record("gelu", (x,), out, backward)


def dropout_mask(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout driven by the caller's generator."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        keep = np.zeros(x.shape, dtype=x.dtype)
    else:
        keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout_mask", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``np.matmul`` semantics; ``b`` may be a shared 2-D weight."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.data.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb
    return _record("matmul", (a, b), out, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    """Same-padded 1-D convolution over the time axis.

    x: (..., T, C_in); w: (k, C_in, C_out); output (..., ceil(T/stride), C_out).
    Output frame i is centred on input frame ``stride * i``.
    """
    if stride < 1:
        raise ShapeError("conv1d", x.shape, w.shape, detail=f"stride={stride}")
    if w.data.ndim != 3 or x.data.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[2],):
        raise ShapeError("conv1d", x.shape, w.shape, b.shape, detail="bias")
    k, cin, cout = w.shape
    T = x.shape[-2]
    if T < 1:
        raise ShapeError("conv1d", x.shape, w.shape, detail="empty time axis")
    n_out = -(-T // stride)
    left = k // 2
    right = (n_out - 1) * stride + k - T - left
    pad = [(0, 0)] * (x.data.ndim - 2) + [(left, max(right, 0)), (0, 0)]
    xp = np.pad(x.data, pad)
    span = stride * (n_out - 1) + 1
    cols = np.stack([xp[..., j:j + span:stride, :] for j in range(k)], axis=-2)  # (..., n_out, k, cin)
    w2 = w.data.reshape(k * cin, cout)
    out = cols.reshape(cols.shape[:-2] + (k * cin,)) @ w2
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(g.shape[:-1] + (k, cin))
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j:j + span:stride, :] += gcols[..., j, :]
            gx = gxp[..., left:left + T, :]
        if w.requires_grad:
            c2 = cols.reshape(-1, k * cin)
            gw = (c2.T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)
    return _record("conv1d", inputs, out, backward)


# ---------------------------------------------------------------- normalisation

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    d = x.data.astype(np.float64)
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gx = gg = gb = None
        if x.requires_grad:
            gxh = g64 * gamma.data
            n = x.shape[-1]
            gx = (inv / n) * (n * gxh - gxh.sum(-1, keepdims=True)
                              - xhat * (gxh * xhat).sum(-1, keepdims=True))
            gx = gx.astype(x.dtype)
        if gamma.requires_grad:
            gg = (g64 * xhat).reshape(-1, x.shape[-1]).sum(0).astype(gamma.dtype)
        if beta.requires_grad:
            gb = g64.reshape(-1, x.shape[-1]).sum(0).astype(beta.dtype)
        return gx, gg, gb
    return _record("layer_norm", (x, gamma, beta), out, backward)


def log_softmax(x: Tensor) -> Tensor:
    d = x.data.astype(np.float64)
    m = d.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(d - m).sum(axis=-1, keepdims=True))
    ls = d - lse
    out = ls.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((g64 - np.exp(ls) * g64.sum(-1, keepdims=True)).astype(x.dtype),)
    return _record("log_softmax", (x,), out, backward)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, True = keep) zeroes entries."""
    d = x.data.astype(np.float64)
    if mask is not None:
        d = np.where(mask, d, -np.inf)
    m = d.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(d - m)
    s = e.sum(axis=-1, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)
    out = y.astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((y * (g64 - (g64 * y).sum(-1, keepdims=True))).astype(x.dtype),)
    return _record("softmax", (x,), out, backward)


# ---------------------------------------------------------------- indexing / layout

def embed_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embed_lookup", table.shape, ids.shape, detail="id out of range")
    out = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)
    return _record("embed_lookup", (table,), out, backward)


def concat_time(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise ShapeError("concat_time", *(q.shape for q in parts))
    sizes = [p.shape[-2] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-2)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts)))
    return _record("concat_time", tuple(parts), out, backward)


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    T = x.shape[-2]
    if not 0 <= start <= stop <= T:
        raise ShapeError("slice_time", x.shape, detail=f"slice [{start}:{stop}]")
    out = x.data[..., start:stop, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop, :] = g
        return (gx,)
    return _record("slice_time", (x,), out, backward)


def repeat_time(x: Tensor, factor: int) -> Tensor:
    """Repeat every frame ``factor`` times (frames i*f .. i*f+f-1 copy frame i)."""
    if factor < 1:
        raise ShapeError("repeat_time", x.shape, detail=f"factor={factor}")
    out = np.repeat(x.data, factor, axis=-2)

    def backward(g):
        sh = g.shape[:-2] + (x.shape[-2], factor, g.shape[-1])
        return (g.reshape(sh).sum(axis=-2),)
    return _record("repeat_time", (x,), out, backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = np.argsort(axes)
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _record("sum", (x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))
