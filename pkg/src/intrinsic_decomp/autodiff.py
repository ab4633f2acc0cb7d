"""Dense C x H x W tensors with a reverse-mode tape.

A :class:`Tape` records every operation as a :class:`Node` in creation
order, so node ids are already a topological order and the backward sweep
is a plain reverse loop. Ops are free functions taking nodes; each one
computes its value with numpy and registers a closure returning the
gradients of its parents.

Training runs in float32; the gradient-check harness builds the same graph
on a float64 tape.
"""
from functools import lru_cache

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("tape", "id", "op", "parents", "value", "grad", "backward_fn", "name", "__weakref__")

    def __init__(self, tape, id, op, parents, value, backward_fn=None, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = np.zeros_like(value)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; everything routes through the op functions below
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

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Append-only record of nodes; ids are contiguous from 0."""

    def __init__(self, dtype=np.float32, check_finite=True):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def record(self, op, parents, value, backward_fn=None, name=None):
        for p in parents:
            if p.tape is not self:
                raise ValueError("all inputs must live on the same tape")
        if self.check_finite and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite values produced by {op}")
        node = Node(self, len(self.nodes), op, tuple(parents), value, backward_fn, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name=None):
        """Register an input or parameter array (cast to the tape dtype)."""
        value = np.array(value, dtype=self.dtype, copy=True)
        return self.record("leaf", (), value, name=name)

    def zero_grad(self):
        for n in self.nodes:
            n.grad.fill(0)

    def backward(self, loss, zero_grad=True):
        """Reverse sweep from a scalar ``loss`` node.

        Gradients are reset first unless ``zero_grad`` is False, so calling
        this twice gives identical results.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if zero_grad:
            self.zero_grad()
        loss.grad.fill(1)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.backward_fn is None or not node.parents:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is not None:
                    p.grad += g

    def release(self):
        """Drop every recorded node and its closure.

        Nodes point back at their tape, so without this a finished tape is
        only reclaimed by the cycle collector, which can lag far behind the
        size of the arrays it holds.
        """
        for n in self.nodes:
            n.backward_fn = None
            n.parents = ()
        self.nodes = []

    def grads(self, nodes):
        return {name: n.grad for name, n in nodes.items()}


def _as_node(x, tape):
    if isinstance(x, Node):
        return x
    return tape.leaf(np.asarray(x, dtype=tape.dtype))


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one argument must be a Node")


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def residual_add(a, b):
    """Skip-connection sum; unlike :func:`add` the shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"residual_add shape mismatch {a.shape} vs {b.shape}")
    return a.tape.record("residual_add", (a, b), a.value + b.value, lambda g: (g, g))


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    sa, sb = a.shape, b.shape
    return tape.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    tape = _tape_of(a, b)
    if not isinstance(b, Node):
        c = np.asarray(b, dtype=tape.dtype)
        return tape.record("scale", (a,), a.value * c, lambda g: (_unbroadcast(g * c, a.shape),))
    if not isinstance(a, Node):
        return mul(b, a)
    av, bv = a.value, b.value
    return tape.record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    tape = _tape_of(a, b)
    a, b = _as_node(a, tape), _as_node(b, tape)
    av, bv = a.value, b.value
    out = av / bv

    def backward(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return tape.record("div", (a, b), out, backward)


def relu(x):
    mask = x.value > 0
    return x.tape.record("relu", (x,), np.where(mask, x.value, 0).astype(x.value.dtype),
                         lambda g: (g * mask,))


def softplus(x):
    v = x.value
    out = np.logaddexp(0, v).astype(v.dtype)
    sig = (0.5 * (1 + np.tanh(0.5 * v))).astype(v.dtype)
    return x.tape.record("softplus", (x,), out, lambda g: (g * sig,))


def floor(x, lo):
    """max(x, lo); the gradient is zero where the floor is active."""
    mask = x.value > lo
    out = np.where(mask, x.value, np.asarray(lo, x.value.dtype))
    return x.tape.record("floor", (x,), out, lambda g: (g * mask,))


def square(x):
    v = x.value
    return x.tape.record("square", (x,), v * v, lambda g: (2 * g * v,))


# ---------------------------------------------------------------- reductions


def total(x):
    """Sum of all entries as a 1x1x1 node."""
    shape = x.shape
    out = np.asarray(x.value.sum(), dtype=x.value.dtype).reshape(1, 1, 1)
    return x.tape.record("sum", (x,), out, lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(x):
    n = x.value.size
    return mul(total(x), 1.0 / n)


def mean_channels(x):
    c = x.shape[0]
    out = x.value.mean(axis=0, keepdims=True)
    return x.tape.record("mean_channels", (x,), out,
                         lambda g: (np.broadcast_to(g / c, x.shape).copy(),))


def combine(terms, weights, dtype=None):
    """Weighted sum of scalar nodes, evaluated in float64.

    Used for loss totals so that logged components reproduce the total
    exactly when recombined in double precision.
    """
    tape = terms[0].tape
    vals = [float(t.value.reshape(())) for t in terms]
    out_val = 0.0
    for w, v in zip(weights, vals):
        out_val += float(w) * v
    out = np.asarray(out_val, dtype=dtype or np.float64).reshape(1, 1, 1)

    def backward(g):
        return tuple((g * w).astype(t.value.dtype).reshape(t.shape) for t, w in zip(terms, weights))

    return tape.record("combine", tuple(terms), out, backward)


# ---------------------------------------------------------------- structural


def concat(xs):
    tape = xs[0].tape
    sizes = [x.shape[0] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=0)
    return tape.record("concat", tuple(xs), out, lambda g: tuple(np.split(g, splits, axis=0)))


def pad_to(x, h, w):
    """Zero-pad bottom/right to (h, w)."""
    c, h0, w0 = x.shape
    if (h0, w0) == (h, w):
        return x
    out = np.zeros((c, h, w), dtype=x.value.dtype)
    out[:, :h0, :w0] = x.value
    return x.tape.record("pad", (x,), out, lambda g: (g[:, :h0, :w0].copy(),))


def crop(x, h, w):
    """Keep the top-left (h, w) window."""
    shape = x.shape
    if shape[1:] == (h, w):
        return x

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :h, :w] = g
        return (full,)

    return x.tape.record("crop", (x,), x.value[:, :h, :w].copy(), backward)


def gather_pixels(x, ys, xs):
    """Pick pixels (ys[k], xs[k]) from every channel; result is C x 1 x K."""
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    shape = x.shape
    out = x.value[:, ys, xs][:, None, :]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None), ys, xs), g[:, 0, :])
        return (full,)

    return x.tape.record("gather", (x,), out, backward)


def diff_x(x):
    """Forward difference along width; last column dropped."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, :, 1:] += g
        full[:, :, :-1] -= g
        return (full,)

    return x.tape.record("diff_x", (x,), x.value[:, :, 1:] - x.value[:, :, :-1], backward)


def diff_y(x):
    """Forward difference along height; last row dropped."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, 1:, :] += g
        full[:, :-1, :] -= g
        return (full,)

    return x.tape.record("diff_y", (x,), x.value[:, 1:, :] - x.value[:, :-1, :], backward)


def masked_mse(x, target, mask=None):
    """Mean of (x - target)^2 over included elements.

    ``target`` and ``mask`` are plain arrays; ``mask`` (1 x H x W or
    broadcastable) zeroes excluded pixels and the mean divides by the
    number of included pixels times channels.
    """
    target = np.asarray(target, dtype=x.value.dtype)
    diff = x.value - target
    if mask is None:
        m = np.ones_like(diff)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
    n = float(m.sum())
    if n == 0:
        out = np.zeros((1, 1, 1), dtype=diff.dtype)
        return x.tape.record("mse", (x,), out, lambda g: (np.zeros_like(diff),))
    md = m * diff
    out = np.asarray((md * diff).sum() / n, dtype=diff.dtype).reshape(1, 1, 1)
    return x.tape.record("mse", (x,), out, lambda g: (g.reshape(()) * 2.0 * md / n,))


# ---------------------------------------------------------------- conv / norm


def _conv_out(n, stride):
    return (n - 1) // stride + 1


def _im2col(xp, h_out, w_out, stride, dilation):
    cin = xp.shape[0]
    cols = np.empty((cin, 9, h_out, w_out), dtype=xp.dtype)
    span_h = (h_out - 1) * stride + 1
    span_w = (w_out - 1) * stride + 1
    for ky in range(3):
        for kx in range(3):
            oy, ox = ky * dilation, kx * dilation
            cols[:, ky * 3 + kx] = xp[:, oy:oy + span_h:stride, ox:ox + span_w:stride]
    return cols.reshape(cin * 9, h_out * w_out)


def conv2d(x, weight, bias, stride=1, dilation=1):
    """3x3 cross-correlation with zero padding equal to ``dilation``.

    With stride 1 the spatial size is preserved for any dilation; with
    stride 2 the output is ceil(H/2) x ceil(W/2).
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1:] != (cin, 3, 3):
        raise ShapeError(f"weight {weight.shape} does not match input channels {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias {bias.shape} does not match {cout} output channels")
    d = int(dilation)
    xp = np.pad(x.value, ((0, 0), (d, d), (d, d)))
    h_out, w_out = _conv_out(h, stride), _conv_out(w, stride)
    cols = _im2col(xp, h_out, w_out, stride, d)
    w2 = weight.value.reshape(cout, cin * 9)
    out = (w2 @ cols).reshape(cout, h_out, w_out) + bias.value[:, None, None]

    def backward(g):
        g2 = g.reshape(cout, -1)
        dw = (g2 @ cols.T).reshape(weight.shape)
        db = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(cin, 9, h_out, w_out)
        dxp = np.zeros_like(xp)
        span_h = (h_out - 1) * stride + 1
        span_w = (w_out - 1) * stride + 1
        for ky in range(3):
            for kx in range(3):
                oy, ox = ky * d, kx * d
                dxp[:, oy:oy + span_h:stride, ox:ox + span_w:stride] += dcols[:, ky * 3 + kx]
        return dxp[:, d:d + h, d:d + w], dw, db

    return x.tape.record("conv2d", (x, weight, bias), out, backward)


def channel_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalisation over the H x W plane."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must have one entry per channel")
    v = x.value
    n = v.shape[1] * v.shape[2]
    mu = v.mean(axis=(1, 2), keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.value[:, None, None]
    out = xhat * gv + beta.value[:, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = g * gv
        dx = inv / n * (n * dxhat - dxhat.sum(axis=(1, 2), keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True))
        return dx, dgamma, dbeta

    return x.tape.record("channel_norm", (x, gamma, beta), out.astype(v.dtype), backward)


@lru_cache(maxsize=64)
def _upsample_matrix(n, dtype_str):
    """(2n x n) bilinear weights, half-pixel centres, edge-clamped."""
    m = np.zeros((2 * n, n), dtype=np.float64)
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2 - 0.5, 0.0), n - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[o, i0] += 1 - t
        m[o, i1] += t
    return m.astype(dtype_str)


def upsample2x(x):
    c, h, w = x.shape
    dt = x.value.dtype.str
    uh, uw = _upsample_matrix(h, dt), _upsample_matrix(w, dt)
    out = uh @ x.value @ uw.T
    return x.tape.record("upsample2x", (x,), out, lambda g: (uh.T @ g @ uw,))
