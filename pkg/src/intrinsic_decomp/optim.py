"""Adam with bias correction, operating in place on named parameter arrays."""
import math

import numpy as np


def cosine_lr(base_lr, step, decay_steps):
    """Learning rate for 0-based ``step`` under cosine decay over
    ``decay_steps`` steps; ``decay_steps`` of 0 keeps ``base_lr``.

    The rate never reaches zero: the last decayed step uses
    base_lr * (1 + cos(pi * (T-1) / T)) / 2.
    """
    if decay_steps <= 0:
        return base_lr
    frac = min(step, decay_steps - 1) / decay_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adam_init(params):
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one Adam update to ``params`` (modified in place).

    Returns ``(params, state)`` for convenience. Parameters without an
    entry in ``grads`` are left untouched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= step.astype(p.dtype)
    return params, state
