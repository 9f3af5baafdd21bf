"""Reverse-mode differentiation over numpy arrays.

Every op records a closure on the output tensor; ``Tensor.backward`` walks the
tape in reverse topological order exactly once. Complex quantities are carried
as split real/imaginary tensor pairs (:class:`ComplexMatrix`) so the engine
itself only ever sees real arrays.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    pass


class ComputationError(ArithmeticError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class _State(threading.local):
    def __init__(self):
        self.dtype = np.dtype(np.float32)
        self.grad_enabled = True


_state = _State()


def get_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unknown precision {dtype!r}, expected one of {sorted(_DTYPES)}")
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating-point type ("f32" or "f64")."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._consumed = False

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._consumed = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def _topo(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
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

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if self._consumed:
            raise GraphConsumedError("graph already consumed by a previous backward pass")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        order = self._topo()
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad and node is not self:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parents = node._parents
            if g is not None:
                needs = tuple(p.requires_grad for p in parents)
                pgrads = node._backward(g, needs)
                for p, pg, need in zip(parents, pgrads, needs):
                    if not need or pg is None:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self.grad = grad

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        t = Tensor._wrap(data, True)
        t._parents = parents
        t._backward = backward
        return t
    return Tensor._wrap(data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape

    def back(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return _make(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g, needs: (g * c,))


def swap_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g, needs: (np.swapaxes(g, -1, -2),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows (axis 0) of a tensor; repeated indices accumulate on backward."""
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def back(g, needs):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return _make(a.data[rows], (a,), back)


def scatter_rows(n_rows: int, parts: Sequence[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Sum of row blocks placed at given row indices of an ``n_rows``-row output.

    Indices within one part must be unique; different parts may overlap.
    """
    if not parts:
        raise ShapeError("scatter_rows needs at least one part")
    tail = parts[0][0].shape[1:]
    out = np.zeros((n_rows,) + tail, dtype=parts[0][0].dtype)
    idxs = []
    for t, rows in parts:
        rows = np.asarray(rows, dtype=np.intp)
        if t.shape[0] != rows.shape[0] or t.shape[1:] != tail:
            raise ShapeError(f"scatter part shape {t.shape} incompatible with {rows.shape[0]} rows x {tail}")
        out[rows] += t.data
        idxs.append(rows)

    def back(g, needs):
        return tuple(g[r] if need else None for r, need in zip(idxs, needs))

    return _make(out, tuple(t for t, _ in parts), back)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g, needs):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g, needs: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g, needs: (g * mask,))


def hardtanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = np.abs(a.data) <= 1
    return _make(np.clip(a.data, -1, 1), (a,), lambda g, needs: (g * mask,))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def back(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), sa)
        if needs[1]:
            if b.ndim == 2:
                k, n = sb
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), sb)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), back)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    data = x.data
    if not np.all(np.isfinite(data)):
        raise ComputationError("softmax input contains non-finite values")
    if mask is None:
        shifted = data - data.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not np.all(mask.any(axis=-1)):
            raise ComputationError("masked softmax row with no active entries")
        top = np.where(mask, data, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, data - top, 0)), 0).astype(data.dtype)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), back)


def row_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_softmax expects a matrix, got shape {x.shape}")
    return softmax(x)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs feature width >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g, needs):
        gx = ggain = gbias = None
        if needs[0]:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if needs[1]:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if needs[2]:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate)
    m = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return _make(x.data * m, (x,), lambda g, needs: (g * m,))


@dataclass
class ComplexMatrix:
    """Complex array as a pair of real tensors; leading axes are batch axes."""

    re: Tensor
    im: Tensor

    def __post_init__(self):
        self.re = as_tensor(self.re)
        self.im = as_tensor(self.im, self.re)
        if self.re.shape != self.im.shape:
            raise ShapeError(f"real/imag shape mismatch {self.re.shape} vs {self.im.shape}")

    @classmethod
    def from_numpy(cls, z, dtype=None, requires_grad: bool = False) -> "ComplexMatrix":
        z = np.asarray(z)
        dtype = dtype or get_dtype()
        return cls(Tensor(z.real, requires_grad=requires_grad, dtype=dtype),
                   Tensor(z.imag, requires_grad=requires_grad, dtype=dtype))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self):
        return self.re.shape

    @property
    def rows(self) -> int:
        return self.re.shape[-2]

    @property
    def cols(self) -> int:
        return self.re.shape[-1]

    @property
    def H(self) -> "ComplexMatrix":
        return ComplexMatrix(swap_last(self.re), neg(swap_last(self.im)))

    def conj(self) -> "ComplexMatrix":
        return ComplexMatrix(self.re, neg(self.im))

    def __matmul__(self, other: "ComplexMatrix") -> "ComplexMatrix":
        return cmatmul(self, other)

    def abs2(self) -> Tensor:
        return self.re * self.re + self.im * self.im

    def scale(self, s) -> "ComplexMatrix":
        return ComplexMatrix(mul(self.re, s), mul(self.im, s))


def cmatmul(a: ComplexMatrix, b: ComplexMatrix) -> ComplexMatrix:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cmatmul shape mismatch: {a.shape} @ {b.shape}")
    re = matmul(a.re, b.re) - matmul(a.im, b.im)
    im = matmul(a.re, b.im) + matmul(a.im, b.re)
    return ComplexMatrix(re, im)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Max relative error between recorded gradients and central differences.

    ``f`` must rebuild its graph on every call and be deterministic. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters, got {p.dtype} for {p!r}")
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise ComputationError("objective is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise ComputationError("objective is not finite under perturbation")
                num = (fp - fm) / (2 * h)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, err)
    return worst
