"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything trainable in this package (contrastive encoder, assignment
networks, pooling classifier) runs on these Tensors. The engine is
deliberately small: float64 only, eager numpy forward, closures for the
backward pass. Ops that never appear in a gradient path (argmax bookkeeping,
file IO) stay in plain numpy.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "constant",
    "parameter",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather_rows",
    "take_pairs",
    "sum_",
    "mean_",
    "relu",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "softmax",
    "logsumexp",
    "keep_row_max",
    "edge_mean_aggregate",
    "conv2d",
    "global_avg_pool",
]


class Tensor:
    """A numpy array plus an optional node in the backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward pass ------------------------------------------------------
    def backward(self, grad=None):
        """Run reverse-mode accumulation from this tensor.

        Called on the scalar loss; ``grad`` defaults to 1.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
                else:
                    parent.grad = parent.grad + g


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def parameter(x) -> Tensor:
    return Tensor(x, requires_grad=True)


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = constant(a)

    def backward(g):
        return (-g,)

    return _node(-a.data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return (ga, gb)

    return _node(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = constant(a)

    def backward(g):
        return (g.T,)

    return _node(a.data.T, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    old = a.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _node(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tuple(tensors), backward)


def gather_rows(a, index) -> Tensor:
    """out[i] = a[index[i]]; backward scatter-adds into the source rows."""
    a = constant(a)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _node(a.data[index], (a,), backward)


def take_pairs(a, rows, cols) -> Tensor:
    """out[i] = a[rows[i], cols[i]] for a 2-D tensor."""
    a = constant(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _node(a.data[rows, cols], (a,), backward)


# -- reductions ---------------------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = constant(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            for dim in sorted(ax):
                g = np.expand_dims(g, dim)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _node(out, (a,), backward)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = constant(a)
    if axis is None:
        count = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in ax]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- elementwise nonlinearities -------------------------------------------------

def relu(a) -> Tensor:
    a = constant(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), backward)


def exp(a) -> Tensor:
    a = constant(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _node(out, (a,), backward)


def log(a, floor: float = 0.0) -> Tensor:
    """Natural log; ``floor`` clips the argument to keep gradients finite."""
    a = constant(a)
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    out = np.log(x)

    def backward(g):
        gx = g / x
        if floor > 0:
            gx = gx * (a.data >= floor)
        return (gx,)

    return _node(out, (a,), backward)


def sqrt(a) -> Tensor:
    a = constant(a)
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = constant(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = constant(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _node(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = constant(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m) if keepdims else (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out, (a,), backward)


def keep_row_max(a) -> Tensor:
    """Zero every entry of each row except the (first) maximum."""
    a = constant(a)
    idx = a.data.argmax(axis=1)
    mask = np.zeros_like(a.data)
    mask[np.arange(a.data.shape[0]), idx] = 1.0

    def backward(g):
        return (g * mask,)

    return _node(a.data * mask, (a,), backward)


# -- graph aggregation ----------------------------------------------------------

def edge_mean_aggregate(z, src, dst, num_nodes: int, normalize: bool = True) -> Tensor:
    """Aggregate node features over a directed edge list.

    out[v] = (z[v] + sum_{(u,v) in edges} z[u]) / (1 + indeg(v)) with
    ``normalize``; without it the bare edge sum (no self term, no scaling)
    is returned.
    """
    z = constant(z)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    agg = np.zeros_like(z.data)
    if src.size:
        np.add.at(agg, dst, z.data[src])
    if normalize:
        indeg = np.bincount(dst, minlength=num_nodes).astype(np.float64)
        denom = (1.0 + indeg)[:, None]
        out = (agg + z.data) / denom
    else:
        denom = None
        out = agg

    def backward(g):
        if normalize:
            gn = g / denom
            gz = gn.copy()
            if src.size:
                np.add.at(gz, src, gn[dst])
        else:
            gz = np.zeros_like(g)
            if src.size:
                np.add.at(gz, src, g[dst])
        return (gz,)

    return _node(out, (z,), backward)


# -- convolution (for the patch encoder) ----------------------------------------

_COL_INDEX_CACHE: dict[tuple, tuple] = {}


def _im2col_indices(h, w, kh, kw, stride, pad):
    key = (h, w, kh, kw, stride, pad)
    cached = _COL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    r0 = np.repeat(np.arange(oh) * stride, ow)
    c0 = np.tile(np.arange(ow) * stride, oh)
    rk = np.repeat(np.arange(kh), kw)
    ck = np.tile(np.arange(kw), kh)
    rows = r0[:, None] + rk[None, :]   # (oh*ow, kh*kw)
    cols = c0[:, None] + ck[None, :]
    flat = rows * wp + cols
    cached = (oh, ow, flat)
    _COL_INDEX_CACHE[key] = cached
    return cached


def conv2d(x, w, b=None, stride: int = 2, pad: int = 1) -> Tensor:
    """2-D convolution, NHWC layout, via im2col + matmul.

    x: (B, H, W, C); w: (kh, kw, C, F); b: (F,) or None.
    """
    x, w = constant(x), constant(w)
    bt = constant(b) if b is not None else None
    bsz, h, wd, c = x.data.shape
    kh, kw, cin, f = w.data.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    oh, ow, flat = _im2col_indices(h, wd, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    hp, wp = h + 2 * pad, wd + 2 * pad
    # cols: (B, OH*OW, kh*kw, C) -> (B*OH*OW, kh*kw*C)
    xflat = xp.reshape(bsz, hp * wp, c)
    cols = xflat[:, flat, :]
    cols2 = cols.reshape(bsz * oh * ow, kh * kw * c)
    wmat = w.data.reshape(kh * kw * c, f)
    out = cols2 @ wmat
    if bt is not None:
        out = out + bt.data
    out = out.reshape(bsz, oh, ow, f)

    def backward(g):
        g2 = g.reshape(bsz * oh * ow, f)
        gw = (cols2.T @ g2).reshape(kh, kw, c, f) if w.requires_grad else None
        gb = g2.sum(axis=0) if (bt is not None and bt.requires_grad) else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, oh * ow, kh * kw, c)
            gxp = np.zeros((bsz, hp * wp, c))
            np.add.at(gxp, (slice(None), flat), gcols)
            gxp = gxp.reshape(bsz, hp, wp, c)
            gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        if bt is not None:
            return (gx, gw, gb)
        return (gx, gw)

    parents = (x, w) if bt is None else (x, w, bt)
    return _node(out, parents, backward)


def global_avg_pool(x) -> Tensor:
    """(B, H, W, C) -> (B, C) spatial mean."""
    x = constant(x)
    bsz, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        gx = np.broadcast_to(g[:, None, None, :] / (h * w), x.data.shape)
        return (gx.copy(),)

    return _node(out, (x,), backward)
