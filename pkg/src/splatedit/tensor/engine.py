"""Reverse-mode autodiff on dense numpy arrays.

Small on purpose: a Tensor wraps an ndarray and remembers the op that made
it (parents + a vector-Jacobian closure). backward() linearizes the graph
into a tape (creation order is already topological) and walks it once in
reverse. VJP closures are themselves written with Tensor ops, so gradients
can be re-taped (`create_graph=True`) and differentiated again; unrolled
inner optimization loops train end to end this way.

Float32 is the working precision, float64 is used by the gradient-check
oracles. No GPU, no fusion, no scheduler.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_ids = itertools.count()

# When False, new tensors record no parents: forward values only.
_GRAD_ENABLED = True


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """Immutable-after-creation dense tensor with an optional grad slot.

    `grad` is a plain ndarray accumulator (populated by backward()).
    `_parents`/`_vjp` describe the producing op for reverse traversal.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_tid")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents if _GRAD_ENABLED else ()
        self._vjp = _vjp if _GRAD_ENABLED else None
        self._tid = next(_ids)

    # -- basics -------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """Same values, no history: gradient flow stops here."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return _op(np.asarray(self.data, dtype=dtype), (self,),
                   lambda g: (g.astype_like(self),))

    def astype_like(self, other):
        return self.astype(other.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_lift(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # convenience forwarding
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def backward(self, create_graph=False):
        backward(self, create_graph=create_graph)


def _lift(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _op(data, parents, vjp):
    """Build an op-result tensor. Drops history when grads are off."""
    track = _GRAD_ENABLED and any(_needs_grad(p) for p in parents)
    if track:
        return Tensor(data, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def _needs_grad(t):
    return t.requires_grad or t._parents


# -- tape -------------------------------------------------------------------


def linearize(root):
    """Ordered record of the ops reachable from `root`.

    Iterative post-order DFS; parents always precede children, so the
    returned list is a topological order and reverse iteration is a valid
    backward schedule visiting each node exactly once.
    """
    tape = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so that leftmost parent lands earliest in the tape
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return tape


def grad_of(loss, wrt, create_graph=False):
    """Gradients of a scalar `loss` w.r.t. a list of tensors, as Tensors.

    With create_graph=True the returned gradients carry history and can be
    differentiated again (meta-gradients through unrolled updates).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = linearize(loss)
    grads = {id(loss): Tensor(np.ones_like(loss.data))}
    wanted = {id(t) for t in wrt}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None or node._vjp is None:
            if g is not None and id(node) in wanted:
                grads[id(node)] = g  # keep leaf grads
            continue
        if id(node) in wanted:
            grads[id(node)] = g  # differentiable w.r.t. an interior node
        if create_graph:
            parent_grads = node._vjp(g)
        else:
            with no_grad():
                parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not _needs_grad(p):
                continue
            if pg.data.shape != p.data.shape:
                raise RuntimeError(
                    f"vjp shape {pg.data.shape} != parent shape {p.data.shape}")
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


def backward(loss, create_graph=False):
    """Populate .grad on every reachable requires_grad tensor.

    Accumulation order follows the tape, so repeated runs are bit-identical.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = linearize(loss)
    leaves = [t for t in tape if t.requires_grad and t._vjp is None]
    gs = grad_of(loss, leaves, create_graph=create_graph)
    for t, g in zip(leaves, gs):
        if t.grad is None:
            t.grad = np.array(g.data, copy=True)
        else:
            t.grad = t.grad + g.data


# -- broadcasting helper ------------------------------------------------------


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape` (sum over expanded axes)."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.data.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# -- elementwise ops ----------------------------------------------------------


def add(a, b):
    return _op(a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    return _op(a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(neg(g), b.data.shape)))


def mul(a, b):
    return _op(a.data * b.data, (a, b),
               lambda g: (_unbroadcast(g * b, a.data.shape), _unbroadcast(g * a, b.data.shape)))


def div(a, b):
    return _op(a.data / b.data, (a, b),
               lambda g: (_unbroadcast(g / b, a.data.shape),
                          _unbroadcast(neg(g * a / (b * b)), b.data.shape)))


def neg(a):
    return _op(-a.data, (a,), lambda g: (neg(g),))


def pow_const(a, p):
    p = float(p)
    return _op(a.data ** p, (a,), lambda g: (g * (a ** (p - 1.0)) * p,))


def texp(a):
    out = _op(np.exp(a.data), (a,), None)
    if out._parents:
        out._vjp = lambda g: (g * out,)
    return out


def tlog(a):
    return _op(np.log(a.data), (a,), lambda g: (g / a,))


def tsqrt(a):
    out = _op(np.sqrt(a.data), (a,), None)
    if out._parents:
        out._vjp = lambda g: (g / (out * 2.0),)
    return out


def ttanh(a):
    out = _op(np.tanh(a.data), (a,), None)
    if out._parents:
        out._vjp = lambda g: (g * (1.0 - out * out),)
    return out


def sigmoid(a):
    # stable two-sided form
    d = a.data
    out_data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                        np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out_data = out_data.astype(d.dtype, copy=False)
    out = _op(out_data, (a,), None)
    if out._parents:
        out._vjp = lambda g: (g * out * (1.0 - out),)
    return out


def silu(a):
    return a * sigmoid(a)


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
    return _op(np.clip(a.data, lo, hi), (a,),
               lambda g: (g * Tensor(mask),))


def maximum_const(a, c):
    mask = (a.data > c).astype(a.data.dtype)
    return _op(np.maximum(a.data, c), (a,), lambda g: (g * Tensor(mask),))


# -- shape ops ---------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    return _op(a.data.reshape(shape), (a,),
               lambda g: (reshape(g, a.data.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _op(np.transpose(a.data, axes), (a,),
               lambda g: (transpose(g, inv),))


def swap_last2(a):
    ax = list(range(a.data.ndim))
    ax[-1], ax[-2] = ax[-2], ax[-1]
    return transpose(a, ax)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offs = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for t, o, s in zip(tensors, offs[:-1], sizes):
            idx = [slice(None)] * g.data.ndim
            idx[axis] = slice(int(o), int(o + s))
            outs.append(getitem(g, tuple(idx)))
        return tuple(outs)

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def getitem(a, idx):
    """Basic slicing only; gradient scatters back into a zero tensor."""

    def vjp(g):
        return (_pad_slice(g, a.data.shape, idx),)

    return _op(a.data[idx], (a,), vjp)


def _pad_slice(g, full_shape, idx):
    # inverse of getitem: embed g into zeros of full_shape
    def vjp(gg):
        return (getitem(gg, idx),)

    buf = np.zeros(full_shape, dtype=g.data.dtype)
    buf[idx] = g.data
    return _op(buf, (g,), vjp)


def take_rows(a, idx):
    """Gather rows along axis 0 with an integer index array."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        return (scatter_add_rows(g, idx, a.data.shape),)

    return _op(a.data[idx], (a,), vjp)


def scatter_add_rows(g, idx, full_shape):
    """Adjoint of take_rows: sum rows of g into a zero tensor at idx."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(gg):
        return (take_rows(gg, idx),)

    buf = np.zeros(full_shape, dtype=g.data.dtype)
    np.add.at(buf, idx, g.data)
    return _op(buf, (g,), vjp)


# -- reductions ---------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    axis_t = axis if axis is None else (tuple(axis) if isinstance(axis, (tuple, list)) else (axis,))

    def vjp(g):
        gd = g
        if axis_t is not None and not keepdims:
            shp = list(a.data.shape)
            for ax in axis_t:
                shp[ax] = 1
            gd = reshape(g, shp)
        elif axis_t is None and not keepdims:
            gd = reshape(g, (1,) * a.data.ndim)
        return (broadcast_to(gd, a.data.shape),)

    return _op(np.sum(a.data, axis=axis_t, keepdims=keepdims), (a,), vjp)


def broadcast_to(a, shape):
    shape = tuple(shape)
    return _op(np.broadcast_to(a.data, shape).copy(), (a,),
               lambda g: (_unbroadcast(g, a.data.shape),))


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- matmul -------------------------------------------------------------------


def matmul(a, b):
    """Matrix product; batched when inputs carry equal leading dims.

    1-D operands are not supported: keep explicit (1, n) shapes instead.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim != b.data.ndim and not (a.data.ndim == 2 or b.data.ndim == 2):
        raise ValueError(f"matmul batch ranks disagree: {a.data.shape} @ {b.data.shape}")

    def vjp(g):
        ga = matmul(g, swap_last2(b))
        gb = matmul(swap_last2(a), g)
        return (_unbroadcast_mm(ga, a.data.shape), _unbroadcast_mm(gb, b.data.shape))

    return _op(a.data @ b.data, (a, b), vjp)


def _unbroadcast_mm(g, shape):
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    if g.data.shape != shape:
        raise RuntimeError(f"matmul vjp cannot reduce {g.data.shape} to {shape}")
    return g


# -- fused/common layers -------------------------------------------------------


def softmax_lastdim(x):
    """Row-stochastic softmax over the last axis, max-subtracted."""
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y_data = e / np.sum(e, axis=-1, keepdims=True)
    out = _op(y_data, (x,), None)
    if out._parents:
        def vjp(g):
            dot = tsum(g * out, axis=-1, keepdims=True)
            return ((g - dot) * out,)
        out._vjp = vjp
    return out


def layernorm(x, gain, bias, eps=1e-5):
    """Zero-mean unit-variance over the last axis, then affine."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = tmean(xc * xc, axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return xc * inv * gain + bias


def swiglu_mlp(x, gate_w, up_w, down_w):
    """down( silu(x @ gate_w) * (x @ up_w) ), the gated MLP used everywhere."""
    h = silu(matmul(x, gate_w)) * matmul(x, up_w)
    return matmul(h, down_w)


def custom_op(out_data, parents, vjp_numpy):
    """Escape hatch for hand-derived numpy VJPs (rasterizer backward).

    vjp_numpy maps the output gradient ndarray to per-parent ndarrays;
    results enter the graph as constants, so no second-order flow here.
    """

    def vjp(g):
        outs = vjp_numpy(g.data)
        return tuple(None if o is None else Tensor(o) for o in outs)

    return _op(out_data, tuple(parents), vjp)
