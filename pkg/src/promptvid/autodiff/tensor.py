"""Dense numpy-backed tensors with define-by-run reverse-mode autodiff.

Every differentiable op records its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` replays the recorded graph
in a deterministic topological order (depth-first, parents visited in
argument order), so gradient accumulation order never depends on hashing or
timing.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError, NonFiniteError

_state = {"dtype": np.dtype(np.float32), "grad_enabled": True, "check_finite": True}


def get_default_dtype() -> np.dtype:
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported tensor dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with (64-bit for oracle tests)."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if _state["check_finite"] and data.size and not np.isfinite(data.sum()):
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op}: produced non-finite values")


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _state["dtype"], copy=True)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Backward, op: str) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        track = _state["grad_enabled"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- metadata ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*[t.dtype for t in tensors])


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = _wrap(b, a)
    out = (a.data / b.data).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._result(out.astype(a.dtype, copy=False), (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = a.data * s

    def bw(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return Tensor._result(out, (a,), bw, "silu")


# -- reductions and shape ops ----------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._result(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return Tensor._result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return Tensor._result(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else axis + tensors[0].ndim + 1
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors], axis=ax)


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} do not broadcast") from exc

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction.

    ``valid`` is an optional boolean array broadcastable to ``x``; positions
    where it is False get exactly zero weight. Every row must keep at least
    one valid entry.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last dimension in shape {x.shape}")
    z = x.data
    if valid is not None:
        valid = np.broadcast_to(valid, z.shape)
        if not valid.any(axis=-1).all():
            raise ContractError("softmax: a row has no valid entries")
        z = np.where(valid, z, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out.astype(x.dtype, copy=False), (x,), bw, "softmax")


# -- convolution and resampling ---------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise DimensionError(f"expected 3 values, got {v}")
    return v


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding="same",
           channels_last: bool = False) -> Tensor:
    """Direct 3D convolution of ``x[B, Cin, F, H, W]`` with ``w[Cout, Cin, kt, kh, kw]``.

    ``padding`` is an int, a triple, or ``"same"`` (half the kernel extent on
    each side, for odd kernels). With ``channels_last`` the input and output
    are laid out ``[B, F, H, W, C]`` instead; the kernel layout is unchanged.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise DimensionError(f"conv3d: expected rank-5 input and kernel, got {x.shape} and {w.shape}")
    cin = x.shape[4] if channels_last else x.shape[1]
    if cin != w.shape[1]:
        raise DimensionError(f"conv3d: input has {cin} channels, kernel expects {w.shape[1]}")
    # Work in [C, B, F, H, W] so each kernel offset is a block copy and the product is one GEMM.
    to_cmajor = (4, 0, 1, 2, 3) if channels_last else (1, 0, 2, 3, 4)
    from_cmajor = (1, 2, 3, 4, 0) if channels_last else (1, 0, 2, 3, 4)
    xc = x.data.transpose(to_cmajor)
    cout, ks = w.shape[0], w.shape[2:]
    st = _triple(stride)
    pad = tuple(k // 2 for k in ks) if padding == "same" else _triple(padding)
    xp = np.pad(xc, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else np.ascontiguousarray(xc)
    if any(n < k for n, k in zip(xp.shape[2:], ks)):
        raise DimensionError(f"conv3d: kernel {ks} larger than padded input {xp.shape[2:]}")
    osz = tuple((n - k) // s + 1 for n, k, s in zip(xp.shape[2:], ks, st))
    B = xp.shape[1]
    offsets = [(a, c, e) for a in range(ks[0]) for c in range(ks[1]) for e in range(ks[2])]

    def window(arr, a, c, e):
        return arr[:, :, a : a + st[0] * osz[0] : st[0], c : c + st[1] * osz[1] : st[1],
                   e : e + st[2] * osz[2] : st[2]]

    cols = np.empty((len(offsets), cin, B) + osz, dtype=xp.dtype)
    for j, (a, c, e) in enumerate(offsets):
        cols[j] = window(xp, a, c, e)
    cols2d = cols.reshape(len(offsets) * cin, -1)
    wmat = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, -1)
    out = (wmat @ cols2d).reshape((cout, B) + osz)
    if b is not None:
        out += b.data.reshape(-1, 1, 1, 1, 1)
    out = np.ascontiguousarray(out.transpose(from_cmajor))

    def bw(g):
        gx = gw = gb = None
        g2d = np.ascontiguousarray(g.transpose(to_cmajor)).reshape(cout, -1)
        if w.requires_grad:
            gw = (g2d @ cols2d.T).reshape((cout,) + ks + (cin,)).transpose(0, 4, 1, 2, 3)
        if x.requires_grad:
            gcols = (wmat.T @ g2d).reshape(cols.shape)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j, (a, c, e) in enumerate(offsets):
                window(gxp, a, c, e)[...] += gcols[j]
            gx = gxp[:, :, pad[0] : pad[0] + xc.shape[2], pad[1] : pad[1] + xc.shape[3], pad[2] : pad[2] + xc.shape[4]]
            gx = gx.transpose(from_cmajor)
        if b is not None and b.requires_grad:
            gb = g2d.sum(axis=1)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, bw, "conv3d")


def resample2x(x: Tensor, direction: str, channels_last: bool = False) -> Tensor:
    """2x2 mean pooling (``"down"``) or nearest-neighbour doubling (``"up"``) of the last two axes.

    With ``channels_last`` the spatial axes are the two before the last.
    """
    if x.ndim < (3 if channels_last else 2):
        raise DimensionError(f"resample2x: too few axes in {x.shape}")
    if channels_last:
        *lead, h, w, c = x.shape
        tail = (c,)
    else:
        *lead, h, w = x.shape
        tail = ()
    ya, xa = (-3, -1) if not channels_last else (-4, -2)
    if direction == "down":
        if h % 2 or w % 2:
            raise DimensionError(f"resample2x: cannot halve odd extents {h}x{w}")
        out = x.data.reshape(*lead, h // 2, 2, w // 2, 2, *tail).mean(axis=(ya, xa))

        def bw(g):
            g = g.reshape(*lead, h // 2, 1, w // 2, 1, *tail) * 0.25
            return (np.broadcast_to(g, (*lead, h // 2, 2, w // 2, 2, *tail)).reshape(x.shape),)

        return Tensor._result(out.astype(x.dtype, copy=False), (x,), bw, "down2x")
    if direction == "up":
        big = (*lead, h, 2, w, 2, *tail)
        out = np.broadcast_to(x.data.reshape(*lead, h, 1, w, 1, *tail), big).reshape(x.shape[:len(lead)] + (2 * h, 2 * w) + tail)

        def bw(g):
            return (g.reshape(big).sum(axis=(ya, xa)),)

        return Tensor._result(out, (x,), bw, "up2x")
    raise ContractError(f"resample2x: unknown direction {direction!r}")


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5,
               channels_last: bool = False) -> Tensor:
    """Group normalisation over all non-batch axes of ``x[B, C, ...]`` (or ``x[B, ..., C]``)."""
    B = x.shape[0]
    C = x.shape[-1] if channels_last else x.shape[1]
    if C % groups:
        raise DimensionError(f"group_norm: {C} channels not divisible into {groups} groups")
    if weight.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"group_norm: affine parameters must have shape ({C},)")
    if channels_last:
        xr = x.data.reshape(B, -1, groups, C // groups)
        red_stats = (1, 3)
        bshape = (C,)
    else:
        xr = x.data.reshape(B, groups, -1)
        red_stats = (2,)
        bshape = (1, C) + (1,) * (x.ndim - 2)
    mu = xr.mean(axis=red_stats, keepdims=True)
    xc = xr - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=red_stats, keepdims=True) + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * weight.data.reshape(bshape) + bias.data.reshape(bshape)
    red = tuple(range(x.ndim - 1)) if channels_last else (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g * xhat).sum(axis=red)
        if bias.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            dxhat = (g * weight.data.reshape(bshape)).reshape(xr.shape)
            xh = xhat.reshape(xr.shape)
            gx = inv * (dxhat - dxhat.mean(axis=red_stats, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=red_stats, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, gw, gb

    return Tensor._result(out.astype(x.dtype, copy=False), (x, weight, bias), bw, "group_norm")


# -- reverse pass -----------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        if i == 0:
            if id(node) in seen:
                continue
            seen.add(id(node))
        if i < len(node._parents):
            stack.append((node, i + 1))
            parent = node._parents[i]
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, 0))
        else:
            order.append(node)
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad.

    Returns a map from each such leaf to the gradient contributed by this
    call. The recorded graph is released afterwards.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return result
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = g.astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None
    return result
