"""Central finite-difference checks for every differentiable piece.

Each check rebuilds its graph on a float64 tape, projects the output onto
a fixed random tensor to get a scalar, and compares the analytic gradient
with (f(x + h) - f(x - h)) / 2h at a handful of random coordinates.
"""
import contextlib
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .dataio import LABEL_CODES
from .domain_filter import FilterParams, domain_filter
from .losses import LossWeights, loss_dense, loss_iiw, pairwise_hinge
from .nets import (GuidanceConfig, NetConfig, achromatic_reconstruct, as_nodes,
                   direct_intrinsic_forward, edge_map_op, guidance_forward,
                   init_direct_params, init_guidance_params)
from .pipeline import Model, forward

TOLERANCE = 1e-3


def rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def check(build, inputs, rng, n_coords=10, eps=1e-6, project=True):
    """Compare analytic and numeric gradients of ``build``.

    ``build(tape, leaves)`` returns an output node given a dict of leaf
    nodes; ``inputs`` maps names to float64 arrays. Only inputs whose name
    does not start with ``_`` are perturbed. Returns the max relative error.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    weights = {}

    def scalar(tape, out):
        if out.value.size == 1 or not project:
            return out if out.value.size == 1 else ad.total(out)
        if "w" not in weights:
            weights["w"] = rng.standard_normal(out.shape)
        return ad.total(ad.mul(out, weights["w"]))

    def evaluate(arrays):
        tape = ad.Tape(np.float64, check_finite=False)
        leaves = {k: tape.leaf(v, name=k) for k, v in arrays.items()}
        loss = scalar(tape, build(tape, leaves))
        return tape, leaves, loss

    tape, leaves, loss = evaluate(inputs)
    tape.backward(loss)
    analytic = {k: leaves[k].grad.copy() for k in inputs}
    worst = 0.0
    for name, arr in inputs.items():
        if name.startswith("_"):
            continue
        picks = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, arr.shape)
            vals = []
            for sign in (1, -1):
                pert = dict(inputs)
                a = arr.copy()
                a[idx] += sign * eps
                pert[name] = a
                vals.append(float(evaluate(pert)[2].value.reshape(())))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, rel_error(float(analytic[name][idx]), numeric))
    return worst


@contextlib.contextmanager
def corrupted_filter_adjoint(factor=1.05):
    """Test hook: scale the recursive-pass input adjoint to break it."""
    original = kernels.recursive_pass_adjoint

    def broken(*args, **kw):
        dx, dg = original(*args, **kw)
        return dx * factor, dg

    kernels.recursive_pass_adjoint = broken
    try:
        yield
    finally:
        kernels.recursive_pass_adjoint = original


def _params(init, config, rng):
    return {k: v.astype(np.float64) for k, v in init(config, rng).items()}


def _pairs(rng, h, w, n):
    ys = rng.integers(0, h, size=(n, 2))
    xs = rng.integers(0, w, size=(n, 2))
    same = (ys[:, 0] == ys[:, 1]) & (xs[:, 0] == xs[:, 1])
    xs[same, 1] = (xs[same, 1] + 1) % w
    labels = rng.choice([LABEL_CODES["1"], LABEL_CODES["2"], LABEL_CODES["E"]], size=n)
    return ys[:, 0], xs[:, 0], ys[:, 1], xs[:, 1], labels, rng.uniform(0.2, 1.0, size=n)


def suite(seed=0):
    """Yield (name, build, inputs) for the full gradient suite."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    u = lambda lo, hi, *s: rng.uniform(lo, hi, s)  # noqa: E731
    fp = FilterParams()

    yield "conv2d", lambda t, v: ad.conv2d(v["x"], v["w"], v["b"]), \
        {"x": r(2, 8, 8), "w": r(3, 2, 3, 3), "b": r(3)}
    yield "conv2d_dilated", lambda t, v: ad.conv2d(v["x"], v["w"], v["b"], dilation=2), \
        {"x": r(2, 8, 8), "w": r(3, 2, 3, 3), "b": r(3)}
    yield "conv2d_stride2", lambda t, v: ad.conv2d(v["x"], v["w"], v["b"], stride=2), \
        {"x": r(2, 8, 8), "w": r(3, 2, 3, 3), "b": r(3)}
    x = r(2, 6, 6)
    x[np.abs(x) < 1e-3] = 0.5
    yield "relu", lambda t, v: ad.relu(v["x"]), {"x": x}
    yield "softplus", lambda t, v: ad.softplus(v["x"]), {"x": r(2, 5, 5)}
    yield "channel_norm", lambda t, v: ad.channel_norm(v["x"], v["g"], v["b"]), \
        {"x": r(3, 5, 5), "g": r(3), "b": r(3)}
    yield "residual_add", lambda t, v: ad.residual_add(v["a"], v["b"]), {"a": r(2, 4, 4), "b": r(2, 4, 4)}
    yield "upsample2x", lambda t, v: ad.upsample2x(v["x"]), {"x": r(2, 4, 5)}
    yield "mul_div_broadcast", lambda t, v: ad.div(ad.mul(v["a"], v["b"]), v["c"]), \
        {"a": r(1, 4, 4), "b": r(3, 4, 4), "c": u(0.5, 2, 1, 4, 4)}
    yield "sub_square_mean", lambda t, v: ad.mean(ad.square(ad.sub(v["a"], v["b"]))), \
        {"a": r(2, 4, 4), "b": r(2, 4, 4)}
    fl = u(0.1, 1, 1, 5, 5)
    fl[0, 0, :3] = 0.01  # below the floor: zero gradient there
    yield "floor", lambda t, v: ad.floor(v["x"], 0.05), {"x": fl}
    yield "pad_crop", lambda t, v: ad.crop(ad.mul(ad.pad_to(v["x"], 6, 6), 2.0), 5, 4), {"x": r(2, 5, 4)}
    yield "combine", lambda t, v: ad.combine([ad.total(ad.square(v["a"])), ad.total(v["b"])], [0.35, 2.0]), \
        {"a": r(1, 3, 3), "b": r(1, 3, 3)}
    yield "mean_channels", lambda t, v: ad.mean_channels(v["x"]), {"x": r(3, 4, 4)}
    yield "concat", lambda t, v: ad.concat([v["a"], v["b"]]), {"a": r(3, 4, 4), "b": r(1, 4, 4)}
    yield "gather_pixels", lambda t, v: ad.gather_pixels(v["x"], [0, 1, 1], [2, 3, 3]), {"x": r(2, 4, 4)}
    yield "diff_xy", lambda t, v: ad.add(ad.total(ad.square(ad.diff_x(v["x"]))), ad.total(ad.diff_y(v["x"]))), \
        {"x": r(2, 5, 5)}
    mask = (rng.random((1, 5, 5)) > 0.3).astype(float)
    yield "masked_mse", lambda t, v: ad.masked_mse(v["x"], v["_target"].value, mask), \
        {"x": r(3, 5, 5), "_target": r(3, 5, 5)}
    yield "edge_map", lambda t, v: edge_map_op(v["x"]), {"x": u(0, 1, 3, 7, 7)}
    yield "achromatic_reconstruct", \
        lambda t, v: ad.concat(list(achromatic_reconstruct(v["r"], v["i"]))), \
        {"r": u(0.1, 1, 1, 5, 5), "i": u(0.1, 1, 3, 5, 5)}
    yield "recursive_pass_1d", _pass_build(False), {"x": r(1, 1, 9), "g": u(0, 0.95, 1, 1, 9)}
    yield "recursive_pass_1d_reverse", _pass_build(True), {"x": r(1, 1, 9), "g": u(0, 0.95, 1, 1, 9)}
    for i in range(5):
        yield f"domain_filter_2d[{i}]", lambda t, v: domain_filter(v["x"], v["e"], fp), \
            {"x": r(2 if i % 2 else 1, 8, 8), "e": u(0, 0.05, 1, 8, 8)}
    ph = _pairs(rng, 6, 6, 12)
    yield "hinge_mu", lambda t, v: pairwise_hinge(v["r"], ph), {"r": u(0.2, 1, 1, 6, 6)}

    h = w = 16
    pairs = _pairs(rng, h, w, 20)
    target = u(0, 1, 3, h, w)
    yield "loss_iiw", lambda t, v: loss_iiw(v["r"], v["R"], v["e"], target, pairs, LossWeights.iiw())["total"], \
        {"r": u(0.2, 1, 1, h, w), "R": u(0.2, 1, 3, h, w), "e": u(0, 1, 1, h, w)}
    a_gt, s_gt = u(0, 1, 3, h, w), u(0, 1, 3, h, w)
    dmask = (rng.random((1, h, w)) > 0.2).astype(float)
    yield "loss_dense", lambda t, v: loss_dense(v["a"], v["s"], v["R"], v["e"], a_gt, s_gt, dmask,
                                                LossWeights.dense())["total"], \
        {"a": u(0, 1, 3, h, w), "s": u(0, 1, 3, h, w), "R": u(0, 1, 3, h, w), "e": u(0, 1, 1, h, w)}

    toy = NetConfig(residual_blocks=4, channels=16)
    dp = _params(init_direct_params, toy, rng)
    yield "direct_net_scalar_64", _net_build(toy, dp), {"i": u(0, 1, 3, 64, 64), **_fixed(dp)}
    dual = NetConfig(residual_blocks=2, channels=4, output_mode="dual", branch_split=1)
    dq = _params(init_direct_params, dual, rng)
    yield "direct_net_dual", _net_build(dual, dq), {"i": u(0, 1, 3, 10, 12), **_fixed(dq)}
    odd = NetConfig(residual_blocks=1, channels=4)
    do = _params(init_direct_params, odd, rng)
    yield "direct_net_odd_size", _net_build(odd, do), {"i": u(0, 1, 3, 9, 7), **_fixed(do)}
    gcfg = GuidanceConfig(layers=5, channels=4)
    gp = _params(init_guidance_params, gcfg, rng)

    def guide_build(t, v):
        nodes = {k[1:]: n for k, n in v.items() if k.startswith("_")}
        return guidance_forward(gcfg, nodes, v["i"], edge_map_op(v["i"]))

    yield "guidance_net_concat", guide_build, {"i": u(0, 1, 3, 12, 12), **_fixed(gp)}

    yield "pipeline_iiw_params", *_pipeline_case(rng, "iiw")
    yield "pipeline_dense_params", *_pipeline_case(rng, "dense")


def _fixed(params):
    return {"_" + k: v for k, v in params.items()}


def _net_build(config, params):
    def build(t, v):
        nodes = {k[1:]: n for k, n in v.items() if k.startswith("_")}
        out = direct_intrinsic_forward(config, nodes, v["i"])
        return out if config.output_mode == "scalar" else ad.concat(list(out))
    return build


def _pass_build(reverse):
    def build(t, v):
        x, g = v["x"], v["g"]
        y = kernels.recursive_pass(x.value, g.value[0], reverse)

        def backward(grad):
            dx, dg = kernels.recursive_pass_adjoint(grad, x.value, y, g.value[0], reverse)
            return dx, dg[None]

        return t.record("recursive_pass", (x, g), y, backward)
    return build


def _pipeline_case(rng, mode):
    """Whole pipeline; perturbs a few parameters of both networks."""
    net = NetConfig(residual_blocks=1, channels=4, output_mode="scalar" if mode == "iiw" else "dual",
                    branch_split=1)
    model = Model.create(net, GuidanceConfig(layers=3, channels=4), seed=int(rng.integers(1 << 30)))
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    h = w = 12
    image = rng.uniform(0.05, 1, (3, h, w))
    pairs = _pairs(rng, h, w, 15)
    target = rng.uniform(0, 1, (3, h, w))
    a_gt, s_gt = rng.uniform(0, 1, (3, h, w)), rng.uniform(0, 1, (3, h, w))
    checked = ["direct.front0.w", "direct.block0.conv_a.w", "guide.in.w", "guide.out.b"]
    checked = [k for k in checked if k in params] + [k for k in params if k.endswith(".out.w")][:1]

    def build(t, v):
        nodes = {k.lstrip("_"): n for k, n in v.items() if k not in ("image",)}
        out = forward(model, nodes, v["image"])
        if mode == "iiw":
            return loss_iiw(out["r"], out["filtered"], out["guidance"], target, pairs, LossWeights.iiw())["total"]
        return loss_dense(out["albedo"], out["shading"], out["filtered"], out["guidance"], a_gt, s_gt, None,
                          LossWeights.dense())["total"]

    inputs = {"_image": image}
    for k, val in params.items():
        inputs[k if k in checked else "_" + k] = val

    def build_wrapped(t, v):
        v = dict(v)
        v["image"] = v.pop("_image")
        return build(t, v)

    return build_wrapped, inputs


def run_suite(seed=0, n_coords=10, names=None):
    results = []
    rng = np.random.default_rng(seed + 1)
    for name, build, inputs in suite(seed):
        if names is not None and name not in names:
            continue
        t0 = time.perf_counter()
        err = check(build, inputs, rng, n_coords=n_coords)
        results.append(CheckResult(name, err, n_coords, time.perf_counter() - t0))
    return results
