"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each differentiable op computes its forward value with numpy (or the compiled
kernels) and, when any operand requires a gradient, appends a node holding the
operands and a backward closure to the active :class:`Tape`. :func:`backward`
walks the tape once in reverse and resets it.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition of an op was violated."""


class FullyMaskedRowError(ValueError):
    """Every logit in at least one softmax row is masked out."""

    def __init__(self, rows: int):
        super().__init__(f"{rows} softmax row(s) have no unmasked entry")
        self.rows = rows


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations (operands precede results)."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self.nodes.append(_Node(out, parents, backward))

    def reset(self) -> None:
        self.nodes = []


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    needs = _TAPE.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _TAPE.record(out, parents, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function; exp is only taken of non-positive arguments."""
    e = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    return _make(kernels.gelu(xd), (x,), lambda g: (g * _gelu_grad(xd),))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return kernels.gelu_grad(x)


def binarize_ste(probs: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard 0/1 indicator of ``probs > threshold``; backward is the identity."""
    hard = (probs.data > threshold).astype(np.float64)
    return _make(hard, (probs,), lambda g: (g,))


# ---------------------------------------------------------------- reductions / shape


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), back)


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(shape, g.reshape(-1)[0] / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` gathered by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids outside [0, {table.shape[0]})")
    shape = table.shape

    def back(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC tensor."""
    b, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,),
                 lambda g: (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)),))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape (..., in), w (in, out), b (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = matmul(x2, w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],)) if x.ndim != 2 else y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """NHWC convolution; ``w`` has shape (kh, kw, c_in, c_out)."""
    kh, kw, cin, cout = w.shape
    if x.ndim != 4 or x.shape[3] != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {w.shape}")
    bsz = x.shape[0]
    cols = kernels.im2col(x.data, kh, kw, stride, pad)
    ho, wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(-1, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(bsz, ho, wo, cout)
    xshape = x.shape

    def back(g):
        g2 = g.reshape(-1, cout)
        gx = kernels.col2im(g2 @ w2.T, xshape, kh, kw, stride, pad)
        gw = (cols2.T @ g2).reshape(kh, kw, cin, cout)
        return gx, gw

    y = _make(out, (x, w), back)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------- softmax


def softmax_with_bias(logits: Tensor, bias: Tensor | None = None, lam: float | None = None) -> Tensor:
    """Row-wise (last axis) softmax of ``logits + bias``.

    ``bias`` may broadcast against ``logits``. When ``lam`` is given, rows in
    which every bias entry is at most ``-lam/2`` raise FullyMaskedRowError.
    """
    if bias is None:
        s = logits.data
        parents: tuple[Tensor, ...] = (logits,)
    else:
        _check_broadcast(logits, bias, "softmax_with_bias")
        if np.broadcast_shapes(logits.shape, bias.shape) != logits.shape:
            raise ShapeError(f"softmax_with_bias: bias {bias.shape} exceeds logits {logits.shape}")
        if lam:
            dead = int(np.all(bias.data <= -0.5 * lam, axis=-1).sum())
            if dead:
                raise FullyMaskedRowError(dead)
        s = logits.data + bias.data
        parents = (logits, bias)
    y = kernels.softmax_rows(s)
    bshape = bias.shape if bias is not None else None

    def back(g):
        gs = kernels.softmax_rows_backward(y, g)
        if bshape is None:
            return (gs,)
        return gs, _unbroadcast(gs, bshape)

    return _make(y, parents, back)


def softmax(logits: Tensor) -> Tensor:
    return softmax_with_bias(logits, None)


def mse(a: Tensor, b) -> Tensor:
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------- backward / checks


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that the scalar ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` slots; the tape is reset.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _TAPE
    if not tape.nodes or not loss.requires_grad:
        tape.reset()
        raise ContractError("backward: loss is not connected to any recorded operation")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        _store(node.out, g)
        for p, pg in zip(node.parents, node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            seen[key] = p
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    for key, g in grads.items():
        _store(seen[key], g)
    tape.reset()


def _store(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar graph from the current parameter values.
    Relative error is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    for p in params:
        p.grad = None
    _TAPE.reset()
    loss = f()
    analytic = []
    if loss.requires_grad:
        backward(loss)
    for p in params:
        analytic.append(np.zeros(p.shape) if p.grad is None else p.grad.copy())
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(af[i] - num) / max(1.0, abs(af[i]))
                if not math.isfinite(err):
                    return math.inf
                worst = max(worst, err)
    return worst
