"""Dense float64 tensors with a define-by-run reverse-mode tape.

Usage::

    w = Tensor([[1.0]], requires_grad=True)
    with Tape() as tape:
        loss = ((w @ x - t) ** 2).sum()
    (gw,) = tape.gradient(loss, [w])

Operations always compute their value. They are recorded only while a tape
is active on the current thread and at least one input is tracked, so the
same model code serves for training and for cheap forward-only evaluation.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class ShapeError(ValueError):
    """Raised when the input shapes of an op are incompatible."""

    def __init__(self, op: str, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        msg = f"{op}: incompatible shapes {self.shapes}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


_local = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_local, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- operators -----------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf. Freezing flips ``requires_grad`` off; it stays a parameter."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(data, requires_grad, name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.requires_grad = False
    out.name = None
    out._tape = None
    out._node = None
    tape = getattr(_local, "tape", None)
    if tape is not None and tape._recording:
        for p in parents:
            if p.requires_grad or p._tape is tape:
                tape._record(out, parents, vjp)
                break
    return out


class Tape:
    """Ordered record of primitive ops, replayed backward on demand."""

    def __init__(self):
        self._inputs: list[tuple] = []
        self._vjps: list[Callable] = []
        self._recording = True
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        self._prev = None
        return False

    def __len__(self) -> int:
        return len(self._vjps)

    def _record(self, out: Tensor, parents: tuple, vjp: Callable) -> None:
        out._tape = self
        out._node = len(self._vjps)
        self._inputs.append(parents)
        self._vjps.append(vjp)

    def _replay(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        leaves: dict[int, np.ndarray] = {}
        if loss._tape is not self:
            if loss.requires_grad:
                leaves[id(loss)] = np.ones_like(loss.data)
            return leaves
        buf: list = [None] * len(self._vjps)
        buf[loss._node] = np.ones_like(loss.data)
        for k in range(loss._node, -1, -1):
            g = buf[k]
            if g is None:
                continue
            buf[k] = None
            parents = self._inputs[k]
            grads = self._vjps[k](g)
            for p, gp in zip(parents, grads):
                if gp is None:
                    continue
                if p._tape is self:
                    j = p._node
                    buf[j] = gp if buf[j] is None else buf[j] + gp
                elif p.requires_grad:
                    key = id(p)
                    prev = leaves.get(key)
                    leaves[key] = gp if prev is None else prev + gp
        return leaves

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of ``loss`` keyed by ``id(leaf)`` for every reached leaf."""
        return self._replay(loss)

    def gradient(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients w.r.t. ``params``; unreachable leaves get zeros."""
        leaves = self._replay(loss)
        out = []
        for p in params:
            g = leaves.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else g)
        return out


class no_grad:
    """Suspend recording on the active tape."""

    def __enter__(self):
        self._tape = active_tape()
        if self._tape is not None:
            self._was = self._tape._recording
            self._tape._recording = False
        return self

    def __exit__(self, *exc):
        if self._tape is not None:
            self._tape._recording = self._was
        return False


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    tape = loss._tape if loss._tape is not None else active_tape()
    if tape is None:
        raise TapeError("backward called without an active tape")
    return tape.backward(loss)


# ----------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# ----------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power supports constant exponents only")
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a) -> Tensor:
    return power(a, 2.0)


# ----------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def selu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    pos = ad > 0
    e = SELU_ALPHA * np.exp(np.minimum(ad, 0.0))
    out = SELU_SCALE * np.where(pos, ad, e - SELU_ALPHA)
    return _make(out, (a,), lambda g: (g * SELU_SCALE * np.where(pos, 1.0, e),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _make(out, (a,), lambda g: (g * _sigmoid(ad),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    mask = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * mask,))


ACTIVATIONS = {"relu": relu, "selu": selu, "tanh": tanh, "sigmoid": sigmoid,
               "softplus": softplus, "none": None}


# ----------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", [a.shape, b.shape])
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.multiply.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), vjp)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` as one recorded op; ``x`` is [..., in], ``w`` is [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", [x.shape, w.shape])
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wd.T, xd.reshape(-1, xd.shape[-1]).T
                                             @ g.reshape(-1, g.shape[-1])))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError("linear", [x.shape, w.shape, b.shape], "bias must be [out]")
    out = out + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wd.T, xd.reshape(-1, xd.shape[-1]).T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), vjp)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return reduce_sum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", [old, tuple(shape)]) from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", [old, tuple(shape)]) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]

    def vjp(g):
        full = np.zeros(shape)
        if _needs_add_at(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.asarray(out), (a,), vjp)


def _needs_add_at(index) -> bool:
    # integer-array indexing may repeat positions
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", [t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", [t.shape for t in ts]) from None
    n = len(ts)
    return _make(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ----------------------------------------------------------------------
# grid ops


def _conv_out(n: int, stride: int) -> int:
    return (n + 2 - 3) // stride + 1


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1; ``x`` [B,Cin,H,W], ``w`` [Cout,Cin,3,3]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise ShapeError("conv2d", [x.shape, w.shape])
    xd, wd = x.data, w.data
    B, C, H, W = xd.shape
    Ho, Wo = _conv_out(H, stride), _conv_out(W, stride)
    xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = [(i, j) for i in range(3) for j in range(3)]

    def window(arr, i, j):
        return arr[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride]

    out = np.zeros((B, wd.shape[0], Ho, Wo))
    for i, j in taps:
        out += np.einsum("bchw,oc->bohw", window(xp, i, j), wd[:, :, i, j], optimize=True)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data[None, :, None, None]
        parents = (x, w, b)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i, j in taps:
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, window(xp, i, j), optimize=True)
            window(gxp, i, j)[...] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
        gx = gxp[:, :, 1:-1, 1:-1]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, vjp)


def _neumann_laplacian(u: np.ndarray) -> np.ndarray:
    p = np.pad(u, [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    return (p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
            - 4.0 * u)


def laplacian(u) -> Tensor:
    """5-point Laplacian over the last two axes, unit spacing, zero-flux boundary."""
    u = as_tensor(u)
    if u.ndim < 2 or u.shape[-1] < 3 or u.shape[-2] < 3:
        raise ShapeError("laplacian", [u.shape], "grid must be at least 3x3")
    # the Neumann operator is symmetric, so it is its own adjoint
    return _make(_neumann_laplacian(u.data), (u,), lambda g: (_neumann_laplacian(g),))


OPS: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "square": square,
    "pow": power, "exp": exp, "log": log, "sqrt": sqrt, "sin": sin, "cos": cos,
    "tanh": tanh, "sigmoid": sigmoid, "relu": relu, "selu": selu, "softplus": softplus,
    "matmul": matmul, "linear": linear, "sum": reduce_sum, "mean": reduce_mean,
    "reshape": reshape, "transpose": transpose, "concat": concat, "stack": stack,
    "conv2d": conv2d, "laplacian": laplacian, "clip": clip, "broadcast_to": broadcast_to,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Apply the primitive named ``op``; records on the active tape if any."""
    try:
        fn = OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known: {sorted(OPS)}") from None
    if op in ("concat", "stack"):
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)
