"""Guided recursive edge-preserving domain filter.

Each iteration k runs four 1-D passes (left->right, right->left,
top->bottom, bottom->top) of

    Y_i = (1 - g_i) X_i + g_i Y_{i-1}

with coefficients g = a_k ** d, d = 1 + (sigma_s / sigma_r) * E' and a
feedback constant a_k whose spatial scale halves every iteration. All
channels share one coefficient map.
"""
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels

_PASSES = (("h", False), ("h", True), ("v", False), ("v", True))


@dataclass(frozen=True)
class FilterParams:
    sigma_s: float = 60.0
    sigma_r: float = 0.1
    iterations: int = 3

    def __post_init__(self):
        if not self.sigma_s > 0 or not self.sigma_r > 0:
            raise ValueError("sigma_s and sigma_r must be positive")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError("iterations must be a positive integer")

    def to_dict(self):
        return asdict(self)


def sigma_h(params, k):
    n = params.iterations
    return params.sigma_s * math.sqrt(3.0) * 2.0 ** (n - k) / math.sqrt(4.0 ** n - 1.0)


def feedback(params, k):
    """Per-iteration base a_k = exp(-sqrt(2) / sigma_H,k)."""
    return math.exp(-math.sqrt(2.0) / sigma_h(params, k))


def coefficients(edges, params, k):
    """Diffusion coefficients g in (0, 1) for iteration ``k`` (1-based)."""
    edges = np.asarray(edges)
    if not 1 <= k <= params.iterations:
        raise ValueError(f"iteration index {k} outside 1..{params.iterations}")
    dtype = edges.dtype if edges.dtype in (np.float32, np.float64) else np.float64
    d = 1.0 + (params.sigma_s / params.sigma_r) * edges.astype(np.float64)
    return np.power(feedback(params, k), d).astype(dtype)


def recursive_pass_1d(x, g, direction="forward"):
    """Filter a single 1-D signal. ``g[0]`` is unused going forward and
    ``g[-1]`` unused going backward."""
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.ndim != 1 or x.shape != g.shape or x.size < 1:
        raise ValueError("x and g must be non-empty 1-D arrays of equal length")
    y = kernels.recursive_pass(x[None, None, :], g[None, :], reverse=direction == "backward")
    return y[0, 0]


def _run_pass(cur, g, gt, axis, reverse):
    if axis == "h":
        return kernels.recursive_pass(cur, g, reverse)
    y = kernels.recursive_pass(np.ascontiguousarray(cur.transpose(0, 2, 1)), gt, reverse)
    return np.ascontiguousarray(y.transpose(0, 2, 1))


def domain_filter_2d(image, edges, params, keep_intermediates=False):
    """Filter a C x H x W ``image`` guided by the 1 x H x W map ``edges``.

    With ``keep_intermediates`` also returns the per-pass records needed by
    :func:`domain_filter_backward`.
    """
    image = np.asarray(image)
    edges = np.asarray(edges)
    if image.ndim != 3 or edges.shape != (1,) + image.shape[1:]:
        raise ValueError(f"edge map {edges.shape} does not match image {image.shape}")
    dtype = image.dtype if image.dtype in (np.float32, np.float64) else np.float64
    cur = np.ascontiguousarray(image, dtype=dtype)
    saved = []
    for k in range(1, params.iterations + 1):
        g = np.ascontiguousarray(coefficients(edges, params, k)[0], dtype=dtype)
        gt = np.ascontiguousarray(g.T)
        for axis, reverse in _PASSES:
            y = _run_pass(cur, g, gt, axis, reverse)
            if keep_intermediates:
                saved.append((k, axis, reverse, cur, y, g, gt))
            cur = y
    if keep_intermediates:
        return cur, saved
    return cur


def domain_filter_backward(grad_out, saved, edges, params):
    """Adjoint of :func:`domain_filter_2d`: returns (dL/dimage, dL/dedges)."""
    grad = np.ascontiguousarray(grad_out)
    dg_total = {k: np.zeros_like(saved[0][5]) for k in range(1, params.iterations + 1)}
    for k, axis, reverse, x, y, g, gt in reversed(saved):
        if axis == "h":
            grad, dg = kernels.recursive_pass_adjoint(grad, x, y, g, reverse)
            dg_total[k] += dg
        else:
            tr = lambda a: np.ascontiguousarray(a.transpose(0, 2, 1))  # noqa: E731
            dxt, dgt = kernels.recursive_pass_adjoint(tr(grad), tr(x), tr(y), gt, reverse)
            grad = tr(dxt)
            dg_total[k] += dgt.T
    ratio = params.sigma_s / params.sigma_r
    dedges = np.zeros(edges.shape, dtype=grad.dtype)
    for k, dg in dg_total.items():
        g = saved[4 * (k - 1)][5]
        dedges[0] += dg * g * (math.log(feedback(params, k)) * ratio)
    return grad, dedges


def domain_filter(image, edges, params):
    """Tape op: differentiable in both the image and the edge map."""
    out, saved = domain_filter_2d(image.value, edges.value, params, keep_intermediates=True)
    ev = edges.value

    def backward(g):
        dx, de = domain_filter_backward(g, saved, ev, params)
        return dx.astype(image.value.dtype), de.astype(ev.dtype)

    return image.tape.record("domain_filter", (image, edges), out, backward)
