"""Small reverse-mode autodiff array library.

Tensors wrap contiguous numpy buffers. Every differentiable op records its
parents and a closure mapping the output gradient to parent gradients;
``Tensor.backward`` replays those closures in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(_DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}") from None
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.asarray(arr, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False) -> "Tensor":
        return reduce(self, axis, "max", keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    post: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    post.reverse()
    return post


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, order="C")
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _make(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), back)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} x {b.shape}") from exc
    ad, bd = a.data, b.data

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = np.matmul(ad.reshape(-1, ad.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax. NaN inputs propagate to NaN outputs."""
    xd = x.data
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs last axis {x.shape[-1]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, g.shape[-1])
        ggain = (flat * xhat.reshape(-1, g.shape[-1])).sum(axis=0) if gain.requires_grad else None
        gbias = flat.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back)


# -- shape manipulation ------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries of ``x`` along ``axis`` (numpy ``take``); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather index out of range for axis {axis} of extent {n}")
    idx = np.where(idx < 0, idx + n, idx)
    src = x.shape

    def back(g):
        full = np.zeros(src, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        lead = list(range(axis, axis + idx.ndim))
        np.add.at(moved, idx, np.moveaxis(g, lead, list(range(idx.ndim))))
        return (full,)

    return _make(np.take(x.data, idx, axis=axis), (x,), back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` for integer ``ids`` of any shape; output shape ids.shape + (width,)."""
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding id out of range [0, {vocab})")
    flat = ids.reshape(-1)
    width = table.shape[1]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, flat, g.reshape(-1, width))
        return (full,)

    return _make(table.data[flat].reshape(ids.shape + (width,)), (table,), back)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- reductions --------------------------------------------------------------

def reduce(x: Tensor, axis=None, op: str = "sum", keepdims: bool = False) -> Tensor:
    xd = x.data
    src = xd.shape
    if axis is None:
        axes = tuple(range(xd.ndim))
    else:
        axes = tuple(a % xd.ndim for a in np.atleast_1d(axis))
    count = int(np.prod([src[a] for a in axes])) if axes else 1

    def expand(g):
        return g if keepdims else np.expand_dims(g, axes)

    if op == "sum":
        out = xd.sum(axis=axes, keepdims=keepdims)
        return _make(np.asarray(out), (x,), lambda g: (np.broadcast_to(expand(g), src).copy(),))
    if op == "mean":
        out = xd.mean(axis=axes, keepdims=keepdims)
        return _make(np.asarray(out), (x,), lambda g: (np.broadcast_to(expand(g) / count, src).copy(),))
    if op == "max":
        out = xd.max(axis=axes, keepdims=True)
        hit = xd == out
        share = hit / hit.sum(axis=axes, keepdims=True)
        res = out if keepdims else np.squeeze(out, axis=axes)
        return _make(np.asarray(res), (x,), lambda g: (share * expand(g),))
    raise ValueError(f"unknown reduction {op!r}")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    norm = sqrt(reduce(mul(x, x), axis, "sum", keepdims=True))
    if eps:
        norm = add(norm, eps)
    return div(x, norm)


# -- verification --------------------------------------------------------------

def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    *,
    max_elements: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
    return_details: bool = False,
):
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` is re-evaluated after perturbing parameter buffers in place, so it must
    read the parameters at call time. ``max_elements`` samples that many entries
    per parameter (all entries when None).
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise GradCheckError(f"objective is not finite at the base point: {out.data}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    details = []
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if max_elements is None or flat.size <= max_elements:
            picks = np.arange(flat.size)
        else:
            picks = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        pw = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"objective not finite when perturbing parameter {pi} element {i}")
            numeric = (fp - fm) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            pw = max(pw, err)
        details.append((p.name or f"param{pi}", pw, len(picks)))
        worst = max(worst, pw)
    return (worst, details) if return_details else worst
