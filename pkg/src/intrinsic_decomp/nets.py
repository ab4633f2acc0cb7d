"""Direct intrinsic network, guidance network and their helper layers.

Both networks are plain functions of a parameter dict (name -> float32
array) and an input node, built from the ops in :mod:`autodiff`.

Direct network layout::

    front:  conv(3->C) | conv(C->C, stride 2) | conv(C->C)      each + norm + relu
    blocks: x -> relu(x + norm(conv_d(relu(norm(conv_d(x))))))  dilated
    tail:   conv | conv  (half resolution) -> bilinear x2 -> final conv

In dual-branch mode the blocks from ``branch_split`` onwards and the tail
are duplicated into an albedo branch and a shading branch.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .domain_filter import FilterParams, domain_filter_2d

R_FLOOR = 1e-4
I_FLOOR = 1e-4


@dataclass(frozen=True)
class NetConfig:
    front_layers: int = 3
    residual_blocks: int = 4
    channels: int = 16
    dilation: int = 2
    tail_layers: int = 3
    output_mode: str = "scalar"  # "scalar" or "dual"
    branch_split: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.residual_blocks < 1 or self.channels < 1:
            raise ValueError("residual_blocks and channels must be >= 1")
        if self.front_layers < 1 or self.tail_layers < 1 or self.dilation < 1:
            raise ValueError("front_layers, tail_layers and dilation must be >= 1")
        if self.output_mode not in ("scalar", "dual"):
            raise ValueError("output_mode must be 'scalar' or 'dual'")
        if self.output_mode == "dual" and not 0 <= self.branch_split <= self.residual_blocks:
            raise ValueError("branch_split must lie in 0..residual_blocks")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GuidanceConfig:
    layers: int = 6
    channels: int = 16
    dilation: int = 2
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.layers < 2 or self.channels < 1 or self.dilation < 1:
            raise ValueError("guidance net needs layers >= 2, channels >= 1, dilation >= 1")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- params


def _conv_params(params, rng, name, cin, cout, gain=2.0):
    std = np.sqrt(gain / (cin * 9))
    params[f"{name}.w"] = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
    params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)


def _norm_params(params, name, c):
    params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
    params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)


def _block_params(params, rng, name, c):
    _conv_params(params, rng, f"{name}.conv_a", c, c)
    _norm_params(params, f"{name}.norm_a", c)
    _conv_params(params, rng, f"{name}.conv_b", c, c)
    _norm_params(params, f"{name}.norm_b", c)


def _tail_params(params, rng, prefix, config, out_ch):
    c = config.channels
    for i in range(config.tail_layers - 1):
        _conv_params(params, rng, f"{prefix}.tail{i}", c, c)
        _norm_params(params, f"{prefix}.tail{i}.norm", c)
    _conv_params(params, rng, f"{prefix}.out", c, out_ch, gain=1.0)


def init_direct_params(config, rng, prefix="direct"):
    params = {}
    c = config.channels
    for i in range(config.front_layers):
        _conv_params(params, rng, f"{prefix}.front{i}", 3 if i == 0 else c, c)
        _norm_params(params, f"{prefix}.front{i}.norm", c)
    if config.output_mode == "scalar":
        for b in range(config.residual_blocks):
            _block_params(params, rng, f"{prefix}.block{b}", c)
        _tail_params(params, rng, prefix, config, 1)
    else:
        for b in range(config.branch_split):
            _block_params(params, rng, f"{prefix}.block{b}", c)
        for branch in ("albedo", "shading"):
            for b in range(config.branch_split, config.residual_blocks):
                _block_params(params, rng, f"{prefix}.{branch}.block{b}", c)
            _tail_params(params, rng, f"{prefix}.{branch}", config, 3)
    return params


def init_guidance_params(config, rng, prefix="guide"):
    params = {}
    c = config.channels
    _conv_params(params, rng, f"{prefix}.in", 4, c)
    _norm_params(params, f"{prefix}.in.norm", c)
    middle = config.layers - 2
    for b in range(middle // 2):
        _block_params(params, rng, f"{prefix}.block{b}", c)
    if middle % 2:
        _conv_params(params, rng, f"{prefix}.extra", c, c)
        _norm_params(params, f"{prefix}.extra.norm", c)
    _conv_params(params, rng, f"{prefix}.out", c, 1, gain=1.0)
    return params


# ---------------------------------------------------------------- layers


def _conv(nodes, x, name, stride=1, dilation=1):
    return ad.conv2d(x, nodes[f"{name}.w"], nodes[f"{name}.b"], stride=stride, dilation=dilation)


def _conv_norm_relu(nodes, x, name, norm_name, eps, stride=1, dilation=1):
    h = _conv(nodes, x, name, stride, dilation)
    h = ad.channel_norm(h, nodes[f"{norm_name}.gamma"], nodes[f"{norm_name}.beta"], eps)
    return ad.relu(h)


def _block(nodes, x, name, dilation, eps):
    h = _conv_norm_relu(nodes, x, f"{name}.conv_a", f"{name}.norm_a", eps, dilation=dilation)
    h = _conv(nodes, h, f"{name}.conv_b", dilation=dilation)
    h = ad.channel_norm(h, nodes[f"{name}.norm_b.gamma"], nodes[f"{name}.norm_b.beta"], eps)
    return ad.relu(ad.residual_add(x, h))


def _tail(nodes, x, prefix, config):
    for i in range(config.tail_layers - 1):
        x = _conv_norm_relu(nodes, x, f"{prefix}.tail{i}", f"{prefix}.tail{i}.norm", config.norm_eps)
    x = ad.upsample2x(x)
    return _conv(nodes, x, f"{prefix}.out")


def as_nodes(tape, params):
    """Register every parameter array on ``tape``; returns name -> node."""
    return {name: tape.leaf(v, name=name) for name, v in params.items()}


def direct_intrinsic_forward(config, nodes, image, prefix="direct"):
    """Run the direct network on a 3 x H x W ``image`` node.

    Scalar mode returns the positive reflectance intensity r (1 x H x W);
    dual mode returns (albedo, shading), each 3 x H x W. Odd sizes are
    zero-padded to even internally and cropped back.
    """
    _, h, w = image.shape
    he, we = h + h % 2, w + w % 2
    x = ad.pad_to(image, he, we)
    eps = config.norm_eps
    for i in range(config.front_layers):
        stride = 2 if i == min(1, config.front_layers - 1) else 1
        x = _conv_norm_relu(nodes, x, f"{prefix}.front{i}", f"{prefix}.front{i}.norm", eps, stride=stride)
    if config.output_mode == "scalar":
        for b in range(config.residual_blocks):
            x = _block(nodes, x, f"{prefix}.block{b}", config.dilation, eps)
        out = _tail(nodes, x, prefix, config)
        r = ad.floor(ad.softplus(out), R_FLOOR)
        return ad.crop(r, h, w)
    for b in range(config.branch_split):
        x = _block(nodes, x, f"{prefix}.block{b}", config.dilation, eps)
    outs = []
    for branch in ("albedo", "shading"):
        y = x
        for b in range(config.branch_split, config.residual_blocks):
            y = _block(nodes, y, f"{prefix}.{branch}.block{b}", config.dilation, eps)
        outs.append(ad.crop(_tail(nodes, y, f"{prefix}.{branch}", config), h, w))
    return tuple(outs)


def guidance_forward(config, nodes, image, edges, prefix="guide"):
    """Predict the nonnegative guidance map E' (1 x H x W) from the image
    and its edge map, concatenated to four channels."""
    eps = config.norm_eps
    x = ad.concat([image, edges])
    x = _conv_norm_relu(nodes, x, f"{prefix}.in", f"{prefix}.in.norm", eps)
    middle = config.layers - 2
    for b in range(middle // 2):
        x = _block(nodes, x, f"{prefix}.block{b}", config.dilation, eps)
    if middle % 2:
        x = _conv_norm_relu(nodes, x, f"{prefix}.extra", f"{prefix}.extra.norm", eps,
                            dilation=config.dilation)
    return ad.softplus(_conv(nodes, x, f"{prefix}.out"))


# ---------------------------------------------------------------- fixed layers


def achromatic_reconstruct(r, image):
    """Expand scalar reflectance r into full albedo and grey shading.

    albedo = r / mean_c(I) * I and shading = mean_c(I) / r on all three
    channels, so albedo * shading reproduces I exactly.
    """
    m = ad.floor(ad.mean_channels(image), I_FLOOR)
    albedo = ad.mul(ad.div(r, m), image)
    s = ad.div(m, r)
    shading = ad.concat([s] * image.shape[0])
    return albedo, shading


def _offsets(radius=2):
    return [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if (dy, dx) != (0, 0)]


def _shift_slices(h, w, dy, dx):
    """Slices (for pixel i, for neighbour j = i + (dy, dx)) where both exist."""
    iy = slice(max(0, -dy), h - max(0, dy))
    ix = slice(max(0, -dx), w - max(0, dx))
    jy = slice(max(0, dy), h - max(0, -dy))
    jx = slice(max(0, dx), w - max(0, -dx))
    return (iy, ix), (jy, jx)


def _edge_terms(image):
    s = np.asarray(image).sum(axis=0)
    h, w = s.shape
    acc = np.zeros_like(s)
    count = np.zeros_like(s)
    for dy, dx in _offsets():
        (iy, ix), (jy, jx) = _shift_slices(h, w, dy, dx)
        acc[iy, ix] += np.abs(s[iy, ix] - s[jy, jx])
        count[iy, ix] += 1
    return s, acc, np.maximum(count, 1)


def edge_map(image):
    """Border-normalised edge strength of a C x H x W array (numpy).

    E_i = mean over neighbours j within Chebyshev distance 2 of
    |sum_c (G_i^c - G_j^c)|; neighbours outside the image are skipped.
    """
    _, acc, count = _edge_terms(image)
    return (acc / count)[None]


def edge_map_op(image):
    """Tape version of :func:`edge_map` (subgradient 0 where differences vanish)."""
    s, acc, count = _edge_terms(image.value)
    h, w = s.shape
    c = image.shape[0]

    def backward(g):
        gi = g[0] / count
        ds = np.zeros_like(s)
        for dy, dx in _offsets():
            (iy, ix), (jy, jx) = _shift_slices(h, w, dy, dx)
            t = np.sign(s[iy, ix] - s[jy, jx]) * gi[iy, ix]
            ds[iy, ix] += t
            ds[jy, jx] -= t
        return (np.broadcast_to(ds, (c, h, w)).astype(g.dtype),)

    return image.tape.record("edge_map", (image,), (acc / count)[None].astype(s.dtype), backward)


def guidance_proxy(image, params=None, outer_iterations=3):
    """Piecewise-flat stand-in target G* = f(I).

    Repeated self-guided domain filtering: each round recomputes the edge
    map of the current estimate and filters with it.
    """
    params = params or FilterParams()
    g = np.asarray(image, dtype=np.float64)
    for _ in range(outer_iterations):
        g = domain_filter_2d(g, edge_map(g), params)
    return g.astype(np.asarray(image).dtype if np.asarray(image).dtype.kind == "f" else np.float64)
