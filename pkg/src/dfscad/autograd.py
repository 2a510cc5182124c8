"""Small reverse-mode autodiff over numpy arrays.

Only the operators needed by the patch description networks, the
auto-encoder and the distillation losses are provided. Every tensor is a
thin wrapper around an ``np.ndarray``; operations build a graph that
:func:`grad` walks in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "grad",
    "quantile",
    "conv2d",
    "avg_pool2d",
    "instance_norm",
    "bilinear_resize",
    "relu",
    "sigmoid",
    "concat",
    "l2_normalize",
    "channel_norm",
    "OPERATORS",
]


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        data = np.asarray(data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _make(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _make(a.data - b.data, (a, b), backward, "sub")

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _make(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other

        def backward(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return _make(a.data / b.data, (a, b), backward, "div")

    def square(self) -> "Tensor":
        x = self.data
        return _make(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(self.dtype)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(self.dtype),)

        return _make(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def __getitem__(self, idx) -> "Tensor":
        shape, dtype = self.shape, self.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return _make(self.data[idx], (self,), backward, "getitem")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _make(data, parents, backward, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(loss: Tensor, params) -> list:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters that do not influence the loss get a zero array.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    params = list(params)
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = []
    for p in params:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape))
    return out


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile at sorted index ``q * (n - 1)``."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must lie in [0, 1], got {q}")
    return float(np.quantile(v, q, method="linear"))


# -- elementwise -----------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def l2_normalize(x: Tensor, axis=0, eps=1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    norm = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis, keepdims=True)).astype(x.dtype)
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return _make(y, (x,), backward, "l2_normalize")


def channel_norm(x: Tensor, axis=0) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as zero."""
    n = np.sqrt((x.data.astype(np.float64) ** 2).sum(axis=axis)).astype(x.dtype)

    def backward(g):
        nz = n > 0
        scale = np.where(nz, g / np.where(nz, n, 1), 0)
        return (np.expand_dims(scale, axis) * x.data,)

    return _make(n, (x,), backward, "channel_norm")


# -- spatial operators ------------------------------------------------------

def _check_chw(x: Tensor, name: str):
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected a C x H x W input, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in x H x W map with a C_out x C_in x k x k kernel."""
    _check_chw(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {w.shape}")
    c_in, h, wd = x.shape
    c_out, wc_in, k, _ = w.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} != kernel in_channels {wc_in}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != out_channels ({c_out},)")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d: need k >= 1, stride >= 1, padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: kernel size {k} exceeds padded input height/width {hp}x{wp}")
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # cols: (h_out*w_out, c_in*k*k)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * k * k)
    wm = w.data.reshape(c_out, -1)
    out = (wm @ cols.T).reshape(c_out, h_out, w_out)
    if b is not None:
        out = out + b.data[:, None, None]

    def backward(g):
        gm = g.reshape(c_out, -1)
        gw = (gm @ cols).reshape(w.shape)
        gb = g.sum(axis=(1, 2)) if b is not None else None
        gx = None
        if x.requires_grad:
            dcols = (wm.T @ gm).reshape(c_in, k, k, h_out, w_out)
            gxp = np.zeros((c_in, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + wd]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out.astype(x.dtype, copy=False), parents, backward, "conv2d")


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    _check_chw(x, "avg_pool2d")
    stride = k if stride is None else stride
    c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ValueError("avg_pool2d: need k >= 1 and stride >= 1")
    if h < k or w < k:
        raise ShapeError(f"avg_pool2d: window {k} larger than input {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    out = np.zeros((c, h_out, w_out), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            out += x.data[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    out /= k * k

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gk
        return (gx,)

    return _make(out.astype(x.dtype), (x,), backward, "avg_pool2d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over H x W followed by an affine map."""
    _check_chw(x, "instance_norm")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("instance_norm: eps must be positive")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(1, 2), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.astype(np.float64)[:, None, None]
    out = g_ * xhat + beta.data[:, None, None]

    def backward(g):
        g64 = g.astype(np.float64)
        dgamma = (g64 * xhat).sum(axis=(1, 2))
        dbeta = g64.sum(axis=(1, 2))
        gh = g64 * g_
        dx = inv * (gh - gh.mean(axis=(1, 2), keepdims=True) - xhat * (gh * xhat).mean(axis=(1, 2), keepdims=True))
        dt = x.dtype
        return dx.astype(dt), dgamma.astype(dt), dbeta.astype(dt)

    return _make(out.astype(x.dtype), (x, gamma, beta), backward, "instance_norm")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centres, negative source coordinates clamped to 0
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Bilinear resampling with align_corners=False semantics."""
    _check_chw(x, "bilinear_resize")
    if h_out < 1 or w_out < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    _, h, w = x.shape
    if (h, w) == (h_out, w_out):
        return _make(x.data.copy(), (x,), lambda g: (g,), "bilinear_resize")
    rh = _interp_matrix(h, h_out).astype(x.dtype)
    rw = _interp_matrix(w, w_out).astype(x.dtype)
    out = np.einsum("oh,chw,pw->cop", rh, x.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("oh,cop,pw->chw", rh, g, rw, optimize=True),)

    return _make(out, (x,), backward, "bilinear_resize")


OPERATORS = (
    "add", "sub", "mul", "div", "neg", "square", "sum", "mean", "reshape", "getitem",
    "relu", "sigmoid", "concat", "l2_normalize", "channel_norm",
    "conv2d", "avg_pool2d", "instance_norm", "bilinear_resize",
)
