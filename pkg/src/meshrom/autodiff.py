"""Dense f64 arrays with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Without an active tape nothing is recorded,
which is how inference runs::

    with Tape() as tape:
        loss = mse_loss(mlp_apply(p, x), y)
    tape.backward(loss)       # fills .grad of every leaf with requires_grad

A tape can be run backward once; it is discarded afterwards.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, ShapeError, UnsupportedError, ValidationError

_TAPES: list["Tape"] = []


class Tape:
    def __init__(self):
        self._records = []
        self._consumed = False

    def __enter__(self):
        if self._consumed:
            raise UnsupportedError("tape already consumed by backward()")
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records.clear()
        self._consumed = False

    def _record(self, out, parents, fn):
        out._node = len(self._records)
        out._tape = self
        self._records.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        if self._consumed:
            raise UnsupportedError("double backward is not supported; the tape was already consumed")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            shape = getattr(getattr(loss, "data", None), "shape", None)
            raise ValidationError(f"backward() needs a scalar loss, got shape {shape}")
        self._consumed = True
        if loss._tape is not self:
            if loss.requires_grad and loss._tape is None:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            self._records.clear()
            return
        grads = {loss._node: np.ones_like(loss.data)}
        for node in range(loss._node, -1, -1):
            g = grads.pop(node, None)
            if g is None:
                continue
            out, parents, fn = self._records[node]
            for p, gp in zip(parents, fn(g)):
                if gp is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    prev = grads.get(p._node)
                    grads[p._node] = gp if prev is None else prev + gp
                else:
                    _accumulate_leaf(p, gp)
        self._records.clear()


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: "Tensor") -> None:
    """Run the tape that produced ``loss`` backward."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        if isinstance(loss, Tensor) and loss.data.size == 1 and loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise ValidationError("loss was not produced on a tape")
    tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = -1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __neg__ = lambda a: mul(a, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._node = -1
    live = [p for p in parents if p.requires_grad]
    out.requires_grad = bool(live) and bool(_TAPES)
    if out.requires_grad:
        _TAPES[-1]._record(out, parents, fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "add")
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "sub")
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner),)

    return _make(0.5 * v * (1.0 + t), (x,), fn, "gelu")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t ** 2),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make(e, (x,), lambda g: (g * e,), "exp")


ACTIVATIONS = {"relu": relu, "gelu": gelu, "tanh": tanh}


# --- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics for operands with ``ndim >= 2``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not chain")
    try:
        out = np.matmul(ad, bd)
    except ValueError:
        raise ShapeError(f"matmul: batch shapes {ad.shape} and {bd.shape} do not broadcast") from None

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def spmm(s: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2 or s.shape[1] != x.data.shape[0]:
        raise ShapeError(f"spmm: sparse {s.shape} times {x.data.shape}")
    st = s.T.tocsr()
    return _make(np.asarray(s @ x.data), (x,), lambda g: (np.asarray(st @ g),), "spmm")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.data.shape for x in xs]}") from None
    sizes = np.cumsum([x.data.shape[axis] for x in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def take(x, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    x = as_tensor(x)
    shape = x.data.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), fn, "take")


# --- reductions ----------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.data.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum(x, axis, keepdims), 1.0 / n)


def mean_rows(x) -> Tensor:
    """Mean over the first axis."""
    return mean(x, axis=0)


# --- fused normalisation / attention helpers ------------------------------------


def layernorm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain * xhat + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layernorm: input width {d}, gain {gain.data.shape}, bias {bias.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), fn, "layernorm")


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable boolean) marks allowed entries; excluded entries get
    exactly zero weight.
    """
    x = as_tensor(x)
    v = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if not np.all(mask.any(axis=-1)):
            raise ValidationError("softmax row with every entry masked")
        v = np.where(mask, v, -np.inf)
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), fn, "softmax")


# --- losses ----------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: {pred.data.shape} vs {target.data.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def l2_norm_loss(pred, target) -> Tensor:
    """Unsquared Euclidean norm of the difference."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l2_norm_loss: {pred.data.shape} vs {target.data.shape}")
    r = pred.data - target.data
    n = float(np.sqrt((r ** 2).sum()))
    if n == 0.0:
        return _make(np.array(0.0), (pred, target), lambda g: (np.zeros_like(r), np.zeros_like(r)), "l2")
    return _make(np.array(n), (pred, target), lambda g: (g * r / n, -g * r / n), "l2")
