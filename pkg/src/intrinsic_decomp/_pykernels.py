"""Pure-numpy recursive-filter line kernels.

Reference semantics for the compiled ``_ckernels`` module: each pass
runs along the last axis of a (C, H, L) signal, vectorised over the
leading axes.
"""
import numpy as np


def recursive_pass(x, g, reverse):
    y = np.empty_like(x)
    L = x.shape[-1]
    if L == 0:
        return y
    order = range(L - 2, -1, -1) if reverse else range(1, L)
    step = 1 if reverse else -1
    first = L - 1 if reverse else 0
    y[..., first] = x[..., first]
    for i in order:
        gi = g[:, i]
        # written as X + g (Y_prev - X) so constants are preserved exactly
        y[..., i] = x[..., i] + gi * (y[..., i + step] - x[..., i])
    return y


def recursive_pass_adjoint(dy, x, y, g, reverse):
    C, H, L = x.shape
    dx = np.empty_like(x)
    dg = np.zeros((H, L), dtype=x.dtype)
    if L == 0:
        return dx, dg
    acc = np.zeros((C, H), dtype=x.dtype)
    if reverse:
        order, prev, last = range(0, L - 1), 1, L - 1
    else:
        order, prev, last = range(L - 1, 0, -1), -1, 0
    for i in order:
        gi = g[:, i]
        gh = dy[..., i] + acc
        dx[..., i] = (1 - gi) * gh
        dg[:, i] = (gh * (y[..., i + prev] - x[..., i])).sum(axis=0)
        acc = gi * gh
    dx[..., last] = dy[..., last] + acc
    return dx, dg
