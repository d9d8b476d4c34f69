"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active and touching at least one
tensor with ``requires_grad`` are appended to that tape.  Outside a tape every
operation is a plain forward evaluation, which doubles as the no-grad mode.

    >>> w = Parameter(np.array(3.0))
    >>> with Tape() as tape:
    ...     loss = square(w)
    >>> tape.gradient(loss, [w])[0]
    array(6., dtype=float32)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Parameter", "Tape", "Adam", "AutodiffError", "precision", "get_dtype",
    "as_tensor", "record", "backward", "gradient_check", "PRIMITIVES",
    "add", "sub", "mul", "div", "neg", "matmul", "conv2d", "conv_transpose2d",
    "sin", "relu", "sigmoid", "exp", "log", "square", "sum", "mean", "maximum",
    "grid_sample", "concat", "reshape", "getitem", "transpose", "leaky_relu",
]


class AutodiffError(ValueError):
    pass


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def get_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with (per thread)."""
    old = get_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = old


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "tape", "index", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.tape = None
        self.index = -1
        self.name = name

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def Parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Records operations in execution order, which is also a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: dict[int, Tensor] = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def _append(self, op, inputs, output, backward_fn):
        for t in inputs:
            if t.requires_grad and t.tape is None:
                self.parameters[id(t)] = t
        output.tape = self
        output.index = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. ``params``; unreachable params get zeros."""
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise AutodiffError("loss must be a scalar tensor")
        if loss.tape is not self:
            raise AutodiffError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.index + 1]):
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
        return [grads.get(id(p), np.zeros_like(p.data)).astype(p.data.dtype, copy=False)
                for p in params]


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Module-level alias of :meth:`Tape.gradient`; defaults to all parameters seen."""
    if params is None:
        params = list(tape.parameters.values())
    return tape.gradient(loss, params)


def _emit(op: str, inputs: tuple, out_data, backward_fn: Callable) -> Tensor:
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape._append(op, inputs, out, backward_fn)
        return out
    return Tensor(out_data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), a.data / b.data, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _emit("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _emit("relu", (a,), np.maximum(a.data, 0), lambda g: (g * (a.data > 0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    """Composite: relu(a) - slope * relu(-a)."""
    return sub(relu(a), mul(slope, relu(neg(a))))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", (a,), a.data * a.data, lambda g: (2.0 * g * a.data,))


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; the gradient goes to ``a`` where ``a > c``."""
    a = as_tensor(a)
    return _emit("maximum", (a,), np.maximum(a.data, c), lambda g: (g * (a.data > c),))


# ---------------------------------------------------------------- reductions and shape

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size // max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _emit("mean", (a,), out, bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", (a,), a.data[idx], bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", ts, out, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), a.data @ b.data, bw)


# ---------------------------------------------------------------- convolutions

def _im2col(xp: np.ndarray, k: int, s: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]


def _col2im(cols: np.ndarray, padded_shape: tuple, k: int, s: int) -> np.ndarray:
    n, c, ho, wo = cols.shape[:4]
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[..., i, j]
    return out


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> tuple:
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), cols, xp.shape


def _conv_input_grad(g, w, padded_shape, stride, padding, in_shape):
    k = w.shape[-1]
    dcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    dxp = _col2im(dcols, padded_shape, k, stride)
    h, wd = in_shape[2], in_shape[3]
    return dxp[:, :, padding:padding + h, padding:padding + wd]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) weights, zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise AutodiffError(f"conv2d shape mismatch {x.shape} vs {w.shape}")
    out, cols, pshape = _conv_fwd(x.data, w.data, stride, padding)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def bw(g):
        gx = _conv_input_grad(g, w.data, pshape, stride, padding, x.shape) if x.requires_grad else None
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv2d", inputs, out, bw)


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d`; weights are (C_in, C_out, k, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise AutodiffError(f"conv_transpose2d shape mismatch {x.shape} vs {w.shape}")
    n, _, h, wd = x.shape
    k = w.shape[-1]
    hp, wp = (h - 1) * stride + k, (wd - 1) * stride + k
    dcols = np.tensordot(x.data, w.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _col2im(dcols, (n, w.shape[1], hp, wp), k, stride)
    out = np.ascontiguousarray(full[:, :, padding:hp - padding, padding:wp - padding])
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(gp, k, stride)
        gx = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) \
            if x.requires_grad else None
        gw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _emit("conv_transpose2d", inputs, out, bw)


# ---------------------------------------------------------------- bilinear sampling

def _corner_indices(c: np.ndarray, size: int, padding: str):
    if padding == "border":
        inside = (c >= 0) & (c <= size - 1)
        cc = np.clip(c, 0, size - 1)
        i0 = np.clip(np.floor(cc), 0, max(size - 2, 0)).astype(np.int64)
        frac = cc - i0
        i1 = np.minimum(i0 + 1, size - 1)
        return i0, i1, frac, inside, np.ones_like(c, bool), np.ones_like(c, bool)
    i0 = np.floor(c).astype(np.int64)
    frac = c - i0
    i1 = i0 + 1
    v0 = (i0 >= 0) & (i0 < size)
    v1 = (i1 >= 0) & (i1 < size)
    return np.clip(i0, 0, size - 1), np.clip(i1, 0, size - 1), frac, np.ones_like(c, bool), v0, v1


def grid_sample(img, coords, padding: str = "border") -> Tensor:
    """Bilinear sampling of (N, C, H, W) images at (N, Ho, Wo, 2) absolute pixel coordinates.

    ``coords[..., 0]`` is the column (x) and ``coords[..., 1]`` the row (y).
    ``padding="border"`` replicates edge pixels, ``"zeros"`` treats the outside as 0.
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if padding not in ("border", "zeros"):
        raise AutodiffError(f"unknown padding {padding!r}")
    if img.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != img.shape[0]:
        raise AutodiffError(f"grid_sample shape mismatch {img.shape} vs {coords.shape}")
    n, c, h, w = img.shape
    _, ho, wo, _ = coords.shape
    x = coords.data[..., 0].reshape(n, -1)
    y = coords.data[..., 1].reshape(n, -1)
    x0, x1, fx, in_x, vx0, vx1 = _corner_indices(x, w, padding)
    y0, y1, fy, in_y, vy0, vy1 = _corner_indices(y, h, padding)
    dt = img.data.dtype
    fx = fx.astype(dt)
    fy = fy.astype(dt)
    gx, gy = 1 - fx, 1 - fy
    flat = img.data.reshape(n, c, h * w)
    corners = []
    for yi, xi, valid in ((y0, x0, vy0 & vx0), (y0, x1, vy0 & vx1), (y1, x0, vy1 & vx0), (y1, x1, vy1 & vx1)):
        idx = yi * w + xi
        vals = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (n, c, idx.shape[1])), axis=2)
        if padding == "zeros":
            vals = vals * valid[:, None, :]
        corners.append((idx, valid, vals))
    (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
    wts = (gy * gx, gy * fx, fy * gx, fy * fx)
    out = (v00 * wts[0][:, None] + v01 * wts[1][:, None]
           + v10 * wts[2][:, None] + v11 * wts[3][:, None])
    out = out.reshape(n, c, ho, wo)

    def bw(g):
        g = g.reshape(n, c, -1)
        g_img = g_coords = None
        if img.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for (idx, valid, _), wt in zip(corners, wts):
                contrib = g * (wt * valid)[:, None, :]
                flat_idx = (base + idx[:, None, :]).ravel()
                acc += np.bincount(flat_idx, weights=contrib.ravel(), minlength=acc.size)
            g_img = acc.astype(dt).reshape(n, c, h, w)
        if coords.requires_grad:
            dx = gy[:, None] * (v01 - v00) + fy[:, None] * (v11 - v10)
            dy = gx[:, None] * (v10 - v00) + fx[:, None] * (v11 - v01)
            gxc = (g * dx).sum(axis=1) * in_x
            gyc = (g * dy).sum(axis=1) * in_y
            g_coords = np.stack([gxc, gyc], axis=-1).reshape(n, ho, wo, 2).astype(dt)
        return g_img, g_coords

    return _emit("grid_sample", (img, coords), out, bw)


PRIMITIVES: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "conv2d": conv2d, "conv_transpose2d": conv_transpose2d, "sin": sin, "relu": relu,
    "sigmoid": sigmoid, "exp": exp, "log": log, "square": square, "sum": sum, "mean": mean,
    "maximum": maximum, "grid_sample": grid_sample, "concat": concat, "reshape": reshape,
    "getitem": getitem, "transpose": transpose,
}


def record(op: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name (recorded if a tape is active)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- optimiser

class Adam:
    """Adam with the usual default moments; operates in place on parameter data."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------- checking

def gradient_check(f: Callable[..., Tensor], point: Sequence[np.ndarray], eps: float = 1e-3,
                   n_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps tensors to a scalar tensor.  With ``n_coords`` only a random
    subset of coordinates (per input) is compared against finite differences.
    Error per coordinate is ``|a - c| / max(1e-8, |a| + |c|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng or np.random.default_rng(0)
    params = [Parameter(np.array(p, dtype=get_dtype())) for p in point]
    with Tape() as tape:
        out = f(*params)
    if out.data.size != 1:
        raise AutodiffError("gradient_check needs a scalar-valued function")
    analytic = tape.gradient(out, params)

    def value() -> float:
        return float(f(*params).data)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if n_coords is not None and n_coords < flat.size:
            idxs = rng.choice(flat.size, size=n_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
