"""Float64 tensors with a reverse-mode tape.

Ops record onto the innermost active :class:`Tape` (thread-local), but only
when at least one input participates in differentiation. Outside a tape every
op is a plain numpy computation.

    with Tape() as tape:
        y = (x * x).sum()
    grads = tape.backward(y)
    grads[x]   # -> ndarray, same shape as x

A tape can be backpropagated exactly once; a second call raises
:class:`ContractError`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


MAX_AXES = 4


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    # ndarray <op> Tensor must dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise DimensionError(f"tensor has {arr.ndim} axes, at most {MAX_AXES} supported")
        self.data = arr
        self.requires_grad = requires_grad
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended in creation order, so inputs always precede the node
    that consumes them; :meth:`backward` walks them once in reverse.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)
        return False

    def append(self, node: _Node) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor) -> "Gradients":
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        self._consumed = True

        acc: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(f"{node.kind}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
        outputs = {id(n.output) for n in self.nodes}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in outputs:
                    leaves[id(t)] = t
        out = Gradients()
        for key, t in leaves.items():
            out[t] = acc.get(key, np.zeros_like(t.data))
        return out


class Gradients(dict):
    """Leaf tensor -> gradient array. Keys compare by identity.

    Indexing with a tensor the tape never saw yields zeros of its shape.
    """

    def __missing__(self, key):
        if isinstance(key, Tensor):
            return np.zeros_like(key.data)
        raise KeyError(key)


def _record(kind: str, out_data: np.ndarray, inputs: Iterable[Tensor], backward) -> Tensor:
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output from op '{kind}'")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.name = None
    inputs = tuple(inputs)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.append(_Node(kind, inputs, out, backward))
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


def _binary_shape(kind, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape))

    return _record("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at x == 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def neg_exp(a) -> Tensor:
    """exp(-x)."""
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(-a.data)
    return _record("neg_exp", out, (a,), lambda g: (-g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _record("log", out, (a,), lambda g: (g / ad,))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = out == a.data
    return _record("clip", out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = expit(x)
    return _record("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record("softmax", out, (a,), back)


# ---------------------------------------------------------------- reductions / shape


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast: cannot broadcast {src} to {tuple(shape)}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, src),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    if out.ndim > MAX_AXES:
        raise DimensionError(f"reshape: {out.ndim} axes exceeds {MAX_AXES}")
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, back)


def matmul(a, b) -> Tensor:
    """2-D or batched matrix product (numpy semantics, leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record("matmul", ad @ bd, (a, b), back)


# ---------------------------------------------------------------- image ops (NCHW)


def _im2col(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, k*k*C) patch matrix, channels innermost."""
    n, c, h, w = x.shape
    pad = dilation * (k - 1) // 2
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    s = xp.strides
    view = as_strided(xp, (n, h, w, k, k, c),
                      (s[0], s[1], s[2], dilation * s[1], dilation * s[2], s[3]), writeable=False)
    return view.reshape(n * h * w, k * k * c)


def _conv_raw(x: np.ndarray, w: np.ndarray, dilation: int, cols=None) -> np.ndarray:
    n, _, h, wd = x.shape
    o, c, k, _ = w.shape
    if cols is None:
        cols = _im2col(x, k, dilation)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(k * k * c, o)
    return np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))


def conv2d(x, w, b=None, dilation: int = 1) -> Tensor:
    """Stride-1 'same' convolution with zero padding.

    x: (N, C, H, W); w: (O, C, k, k) with k odd; b: (O,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    o, c, k, k2 = w.shape
    if k2 != k or k % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {w.shape[-2:]}")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    wd = w.data
    cols = _im2col(x.data, k, dilation)
    out = _conv_raw(x.data, wd, dilation, cols)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({o},)")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def back(g):
        flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _conv_raw(g, flipped, dilation)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (cols.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        grads = [gx, np.ascontiguousarray(gw)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _record("conv2d", out, inputs, back)


def avgpool(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling over the last two axes."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avgpool: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avgpool: {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _record("avgpool", out, (x,), back)


def upsample(x, k: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample: expected NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def back(g):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return _record("upsample", out, (x,), back)


# ---------------------------------------------------------------- verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-6,
                      indices: Iterable[tuple] | None = None) -> float:
    """Max relative gap between the tape gradient of ``f`` at ``x`` and central differences.

    The gap at each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``indices`` restricts the check to a subset of coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    analytic = tape.backward(y).get(xt)
    if analytic is None:
        analytic = np.zeros_like(base)
    if indices is None:
        indices = list(np.ndindex(*base.shape))
    worst = 0.0
    for idx in indices:
        xp = base.copy()
        xp[idx] += step
        fp = f(Tensor(xp)).item()
        xp[idx] = base[idx] - step
        fm = f(Tensor(xp)).item()
        num = (fp - fm) / (2.0 * step)
        a = float(analytic[idx])
        worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst
