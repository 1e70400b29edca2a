"""Reverse-mode automatic differentiation on numpy arrays.

Every value is a float64 ndarray wrapped in a Tensor.  Operations build a
dynamic graph: each result remembers its parents and a closure that routes
the incoming gradient to them.  Tensors carry a global creation sequence
number, so walking the reachable subgraph in decreasing sequence order
replays the recorded operations in exact reverse execution order (a parent
is always created before its children).

backward() accumulates into ``.grad``; callers zero parameter gradients
between steps.  One graph is single-threaded; concurrent graphs must not
share tensors.
"""

from __future__ import annotations

import itertools

import numpy as np

_SEQ = itertools.count()


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ContractError(ValueError):
    """Non-shape precondition of an operation was violated."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; scalars mean python floats, not broadcasting.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Populate .grad for every requires_grad tensor reachable from loss."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any differentiable input")
    nodes = []
    seen = {id(loss)}
    stack = [loss]
    while stack:
        node = stack.pop()
        nodes.append(node)
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    nodes.sort(key=lambda n: n._seq, reverse=True)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += 1.0
    for node in nodes:
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _as_scalar_op(t: Tensor, other):
    if isinstance(other, Tensor):
        return other, False
    return float(other), True


def add(a: Tensor, b) -> Tensor:
    b, scalar = _as_scalar_op(a, b)
    if scalar:
        def bw(g, a=a):
            _accum(a, g)
        return _result(a.data + b, (a,), bw)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def bw(g, a=a, b=b):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b, scalar = _as_scalar_op(a, b)
    if scalar:
        def bw(g, a=a, c=b):
            _accum(a, g * c)
        return _result(a.data * b, (a,), bw)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def bw(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), bw)


def sigmoid(t: Tensor) -> Tensor:
    # Stable in both tails: never exponentiates a positive argument.
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)

    def bw(g, t=t, out=out):
        _accum(t, g * out * (1.0 - out))

    return _result(out, (t,), bw)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)

    def bw(g, t=t, out=out):
        _accum(t, g * (1.0 - out * out))

    return _result(out, (t,), bw)


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0

    def bw(g, t=t, mask=mask):
        _accum(t, g * mask)

    return _result(np.where(mask, t.data, 0.0), (t,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g, tensors=tensors, bounds=bounds, axis=axis):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def reshape(t: Tensor, shape) -> Tensor:
    def bw(g, t=t):
        _accum(t, g.reshape(t.data.shape))

    return _result(t.data.reshape(shape), (t,), bw)


def tensor_sum(t: Tensor) -> Tensor:
    def bw(g, t=t):
        _accum(t, np.full_like(t.data, g))

    return _result(t.data.sum(), (t,), bw)


def mean(t: Tensor, axis: int | None = None) -> Tensor:
    if t.data.size == 0:
        raise ContractError("mean of an empty tensor")
    if axis is None:
        n = t.data.size

        def bw(g, t=t, n=n):
            _accum(t, np.full_like(t.data, g / n))

        return _result(t.data.mean(), (t,), bw)
    n = t.data.shape[axis]

    def bw(g, t=t, n=n, axis=axis):
        _accum(t, np.expand_dims(g, axis).repeat(n, axis=axis) / n)

    return _result(t.data.mean(axis=axis), (t,), bw)


def max_over_axis(t: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient routes to the first argmax along the axis."""
    if t.data.shape[axis] == 0:
        raise ShapeError("max_over_axis over an empty axis")
    arg = np.argmax(t.data, axis=axis)
    out = np.take_along_axis(t.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g, t=t, arg=arg, axis=axis):
        buf = np.zeros_like(t.data)
        np.put_along_axis(buf, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _accum(t, buf)

    return _result(out, (t,), bw)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g, t=t, out=out, axis=axis):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(t, out * (g - dot))

    return _result(out, (t,), bw)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    z = t.data - t.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g, t=t, out=out, axis=axis):
        _accum(t, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (t,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ids; shape (len(ids), dim)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup ids must be 1-D, got {ids.shape}")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError("embedding_lookup: id outside the table")

    def bw(g, table=table, ids=ids):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _result(table.data[ids], (table,), bw)


def take(t: Tensor, flat_indices) -> Tensor:
    """Pick values by flat index; repeated indices accumulate gradient."""
    idx = np.asarray(flat_indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.size):
        raise ContractError("take: index out of range")
    flat = t.data.reshape(-1)

    def bw(g, t=t, idx=idx):
        buf = np.zeros_like(t.data)
        np.add.at(buf.reshape(-1), idx, g)
        _accum(t, buf)

    return _result(flat[idx], (t,), bw)


def slice_tensor(t: Tensor, slices) -> Tensor:
    slices = tuple(slices)

    def bw(g, t=t, slices=slices):
        buf = np.zeros_like(t.data)
        buf[slices] += g
        _accum(t, buf)

    return _result(t.data[slices], (t,), bw)


# ---------------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")

    def bw(g, a=a, b=b):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (N,D) @ weight (D,E) + bias (E,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"linear input must be 2-D, got {x.data.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(f"linear: input {x.data.shape} vs weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"linear: bias {bias.data.shape} vs weight {weight.data.shape}")

    def bw(g, x=x, weight=weight, bias=bias):
        _accum(x, g @ weight.data.T)
        _accum(weight, x.data.T @ g)
        _accum(bias, g.sum(axis=0))

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# 3-D convolution and pooling over (C, T, H, W) volumes


def _triple(v):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int triple, got {v}")
    return v


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride=1, padding=0) -> Tensor:
    """3-D convolution: x (C_in,T,H,W), weight (C_out,C_in,kT,kH,kW), bias (C_out,)."""
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if min(st, sh, sw) < 1:
        raise ContractError("conv3d stride must be positive")
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d: input {x.data.shape}, weight {weight.data.shape}")
    c_out, c_in, kt, kh, kw = weight.data.shape
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv3d: input channels {x.data.shape[0]} != weight channels {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv3d: bias {bias.data.shape} for {c_out} output channels")
    xp = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    _, tp, hp, wp = xp.shape
    if kt > tp or kh > hp or kw > wp:
        raise ShapeError(f"conv3d: kernel {(kt, kh, kw)} larger than padded input {(tp, hp, wp)}")
    ot = (tp - kt) // st + 1
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1

    def win(arr, i, j, k):
        return arr[:, i:i + st * ot:st, j:j + sh * oh:sh, k:k + sw * ow:sw]

    out = np.zeros((c_out, ot, oh, ow))
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                # (c_out,c_in) . (c_in,ot,oh,ow) summed over c_in
                out += np.tensordot(weight.data[:, :, i, j, k], win(xp, i, j, k), axes=([1], [0]))
    out += bias.data[:, None, None, None]

    def bw(g, x=x, weight=weight, bias=bias, xp_shape=xp.shape):
        if weight.requires_grad or x.requires_grad:
            xp_l = np.pad(x.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
            gxp = np.zeros(xp_shape) if x.requires_grad else None
            gw = np.zeros_like(weight.data) if weight.requires_grad else None
            for i in range(kt):
                for j in range(kh):
                    for k in range(kw):
                        if gw is not None:
                            gw[:, :, i, j, k] = np.tensordot(
                                g, win(xp_l, i, j, k), axes=([1, 2, 3], [1, 2, 3]))
                        if gxp is not None:
                            win(gxp, i, j, k)[...] += np.tensordot(
                                weight.data[:, :, i, j, k], g, axes=([0], [0]))
            if gw is not None:
                _accum(weight, gw)
            if gxp is not None:
                tpad, hpad, wpad = x.data.shape[1] + pt, x.data.shape[2] + ph, x.data.shape[3] + pw
                _accum(x, gxp[:, pt:tpad, ph:hpad, pw:wpad])
        _accum(bias, g.sum(axis=(1, 2, 3)))

    return _result(out, (x, weight, bias), bw)


def maxpool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Channelwise 3-D max pooling; gradient goes to the first row-major argmax."""
    kt, kh, kw = _triple(kernel)
    st, sh, sw = (kt, kh, kw) if stride is None else _triple(stride)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool3d input must be (C,T,H,W), got {x.data.shape}")
    c, t, h, w = x.data.shape
    if kt > t or kh > h or kw > w:
        raise ShapeError(f"maxpool3d: kernel {(kt, kh, kw)} larger than input {(t, h, w)}")
    ot = (t - kt) // st + 1
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1

    def win(arr, i, j, k):
        return arr[:, i:i + st * ot:st, j:j + sh * oh:sh, k:k + sw * ow:sw]

    out = np.full((c, ot, oh, ow), -np.inf)
    for i in range(kt):
        for j in range(kh):
            for k in range(kw):
                np.maximum(out, win(x.data, i, j, k), out=out)

    def bw(g, x=x, out=out):
        buf = np.zeros_like(x.data)
        claimed = np.zeros(out.shape, dtype=bool)
        # Row-major offset order makes the first max in each window win ties.
        for i in range(kt):
            for j in range(kh):
                for k in range(kw):
                    hit = (win(x.data, i, j, k) == out) & ~claimed
                    win(buf, i, j, k)[...] += np.where(hit, g, 0.0)
                    claimed |= hit
        _accum(x, buf)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# loss kernels


def smooth_l1(t: Tensor) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 inside |x|<1, |x|-0.5 outside."""
    x = t.data
    inner = np.abs(x) < 1.0
    out = np.where(inner, 0.5 * x * x, np.abs(x) - 0.5)

    def bw(g, t=t, inner=inner):
        _accum(t, g * np.where(inner, t.data, np.sign(t.data)))

    return _result(out, (t,), bw)


BCE_EPS = 1e-7


def binary_cross_entropy(pred: Tensor, target) -> Tensor:
    """Elementwise -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-7, 1-1e-7].

    ``target`` is a constant array of {0,1} labels; gradient flows to pred only
    and is zero where the clamp is active.
    """
    y = np.asarray(target, dtype=np.float64)
    if y.shape != pred.data.shape:
        raise ShapeError(f"bce: target {y.shape} vs pred {pred.data.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    live = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))

    def bw(g, pred=pred, y=y, p=p, live=live):
        _accum(pred, g * live * (-y / p + (1.0 - y) / (1.0 - p)))

    return _result(out, (pred,), bw)
