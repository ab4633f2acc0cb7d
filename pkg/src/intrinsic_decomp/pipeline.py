"""End-to-end model: direct net + guidance net + domain filter, and training.

Data flow for one image I::

    E(I) --------------------------.
    I ----> guidance net ----------+--> E'
    I ----> direct net --> (R', S) |         (scalar mode: r -> R', S via
                             R' ---+--> domain filter --> R   achromatic expansion)
"""
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .domain_filter import FilterParams, domain_filter
from .losses import LossWeights, loss_dense, loss_iiw, loss_joint
from .nets import (GuidanceConfig, NetConfig, achromatic_reconstruct, as_nodes,
                   direct_intrinsic_forward, edge_map_op, guidance_forward, guidance_proxy,
                   init_direct_params, init_guidance_params)
from .optim import adam_init, adam_step, cosine_lr

log = logging.getLogger(__name__)


@dataclass
class Model:
    net: NetConfig = field(default_factory=NetConfig)
    guide: GuidanceConfig = field(default_factory=GuidanceConfig)
    filter: FilterParams = field(default_factory=FilterParams)
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, net=None, guide=None, filter=None, seed=0):
        net = net or NetConfig()
        guide = guide or GuidanceConfig()
        rng = np.random.default_rng(seed)
        params = init_direct_params(net, rng)
        params.update(init_guidance_params(guide, rng))
        return cls(net, guide, filter or FilterParams(), params)

    def config_dict(self):
        return {"net": self.net.to_dict(), "guide": self.guide.to_dict(), "filter": self.filter.to_dict()}


def forward(model, nodes, image):
    """Run the whole pipeline on an image node; returns a dict of nodes."""
    edges_in = edge_map_op(image)
    guidance = guidance_forward(model.guide, nodes, image, edges_in)
    out = {"guidance": guidance}
    if model.net.output_mode == "scalar":
        r = direct_intrinsic_forward(model.net, nodes, image)
        albedo, shading = achromatic_reconstruct(r, image)
        out["r"] = r
    else:
        albedo, shading = direct_intrinsic_forward(model.net, nodes, image)
    out["albedo"] = albedo
    out["shading"] = shading
    out["filtered"] = domain_filter(albedo, guidance, model.filter)
    return out


def predict(model, image):
    """Inference on a C x H x W array; returns a dict of float32 arrays."""
    tape = ad.Tape(np.float32)
    nodes = as_nodes(tape, model.params)
    out = forward(model, nodes, tape.leaf(image))
    result = {k: v.value.copy() for k, v in out.items()}
    tape.release()
    return result


# ---------------------------------------------------------------- training


class TrainingData:
    """Samples plus per-sample targets cached for training."""

    def __init__(self, samples, filter_params=None):
        self.samples = samples
        self.filter_params = filter_params or FilterParams()
        self._pairs = {}
        self._proxy = {}

    def __len__(self):
        return len(self.samples)

    def pairs(self, i):
        if i not in self._pairs:
            s = self.samples[i]
            if s.judgements is None:
                raise ValueError(f"sample {s.name!r} has no judgements")
            self._pairs[i] = s.judgements.pixel_arrays(s.height, s.width)
        return self._pairs[i]

    def proxy(self, i):
        if i not in self._proxy:
            self._proxy[i] = guidance_proxy(self.samples[i].image, self.filter_params)
        return self._proxy[i]


def _iiw_terms(model, tape, nodes, data, i, weights):
    s = data.samples[i]
    image = tape.leaf(s.image)
    out = forward(model, nodes, image)
    if "r" not in out:
        raise ValueError("judgement supervision needs the scalar-reflectance network")
    return loss_iiw(out["r"], out["filtered"], out["guidance"], data.proxy(i), data.pairs(i), weights)


def _dense_terms(model, tape, nodes, data, i, weights, supervise_shading=True):
    s = data.samples[i]
    if s.albedo is None or s.shading is None:
        raise ValueError(f"sample {s.name!r} has no dense ground truth")
    image = tape.leaf(s.image)
    out = forward(model, nodes, image)
    return loss_dense(out["albedo"], out["shading"], out["filtered"], out["guidance"],
                      s.albedo, s.shading, s.mask, weights, supervise_shading)


def sample_indices(seed, step, n, batch=1):
    """Data order for a step; depends only on (seed, step) so runs resume exactly.

    Returns two index lists of length ``batch``: the primary draw and a
    second independent draw used for the dense half of joint training.
    """
    rng = np.random.default_rng([int(seed), int(step)])
    first = rng.integers(n, size=batch)
    second = rng.integers(n, size=batch)
    return [int(i) for i in first], [int(j) for j in second]


def _batch_mean(term_dicts):
    """Average per-sample loss dicts component-wise (float64 combine)."""
    if len(term_dicts) == 1:
        return term_dicts[0]
    w = [1.0 / len(term_dicts)] * len(term_dicts)
    return {k: ad.combine([d[k] for d in term_dicts], w) for k in term_dicts[0]}


def loss_step(model, data, mode, step, seed, weights, tape_dtype=np.float32, params=None, batch_size=1):
    """Build one step's loss graph. Returns (tape, nodes, log-row, total node).

    With ``batch_size > 1`` every loss component is the mean over the batch.
    """
    tape = ad.Tape(tape_dtype)
    nodes = as_nodes(tape, model.params if params is None else params)
    first, second = sample_indices(seed, step, len(data), batch_size)
    row = {"step": step}
    if mode == "iiw":
        terms = _batch_mean([_iiw_terms(model, tape, nodes, data, i, weights) for i in first])
        total = terms["total"]
    elif mode == "dense":
        terms = _batch_mean([_dense_terms(model, tape, nodes, data, i, weights) for i in first])
        total = terms["total"]
    elif mode == "joint":
        iiw_w = LossWeights.iiw(delta=weights.delta, xi=weights.xi)
        dense_w = LossWeights.dense(delta=weights.delta, xi=weights.xi)
        iiw = _batch_mean([_iiw_terms(model, tape, nodes, data, i, iiw_w) for i in first])
        dense = _batch_mean([_dense_terms(model, tape, nodes, data, j, dense_w, supervise_shading=False)
                             for j in second])
        total = loss_joint(iiw["total"], dense["total"], weights.joint_scale)
        terms = {**{f"iiw_{k}": v for k, v in iiw.items()},
                 **{f"dense_{k}": v for k, v in dense.items()}}
        row["iiw"] = float(iiw["total"].value.reshape(()))
        row["dense"] = float(dense["total"].value.reshape(()))
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    for k, v in terms.items():
        if k != "total":
            row[k] = float(v.value.reshape(()))
    row["total"] = float(total.value.reshape(()))
    return tape, nodes, row, total


@dataclass
class TrainState:
    step: int = 0
    adam: dict = None


def save_training_checkpoint(path, model, state, extra_meta=None):
    tensors = dict(model.params)
    if state.adam is not None:
        for k in model.params:
            tensors[f"adam.m/{k}"] = state.adam["m"][k]
            tensors[f"adam.v/{k}"] = state.adam["v"][k]
    meta = {"config": model.config_dict(), "step": state.step,
            "adam_t": state.adam["t"] if state.adam else 0, **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)


def load_model(path):
    """Return (model, state, meta) from a checkpoint file."""
    tensors, meta = load_checkpoint(path)
    cfg = meta["config"]
    model = Model(NetConfig(**cfg["net"]), GuidanceConfig(**cfg["guide"]), FilterParams(**cfg["filter"]))
    model.params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    adam = None
    if any(k.startswith("adam.m/") for k in tensors):
        adam = {"t": int(meta.get("adam_t", 0)),
                "m": {k: tensors[f"adam.m/{k}"] for k in model.params},
                "v": {k: tensors[f"adam.v/{k}"] for k in model.params}}
    return model, TrainState(int(meta.get("step", 0)), adam), meta


def train(model, data, mode, steps, weights=None, lr=1e-3, seed=0, state=None,
          log_rows=None, checkpoint_path=None, checkpoint_every=0, progress_every=0, extra_meta=None,
          batch_size=1, decay_steps=0):
    """Optimise ``model.params`` in place for ``steps`` further steps.

    With ``decay_steps`` > 0 the learning rate follows a cosine decay over
    absolute steps 0..decay_steps, so a resumed run continues the same
    schedule. Returns the TrainState; every step appends its loss row to
    ``log_rows``.
    """
    weights = weights or (LossWeights.dense() if mode == "dense" else LossWeights.iiw())
    state = state or TrainState()
    if state.adam is None:
        state.adam = adam_init(model.params)
    end = state.step + steps
    while state.step < end:
        tape, nodes, row, total = loss_step(model, data, mode, state.step, seed, weights,
                                            batch_size=batch_size)
        tape.backward(total)
        grads = {k: n.grad for k, n in nodes.items()}
        adam_step(model.params, grads, state.adam, cosine_lr(lr, state.step, decay_steps))
        tape.release()
        state.step += 1
        if log_rows is not None:
            log_rows.append(row)
        if progress_every and state.step % progress_every == 0:
            log.info("step %d total %.5f", state.step, row["total"])
        if checkpoint_path and checkpoint_every and state.step % checkpoint_every == 0:
            save_training_checkpoint(checkpoint_path, model, state, extra_meta)
    if checkpoint_path:
        save_training_checkpoint(checkpoint_path, model, state, extra_meta)
    return state


def write_loss_csv(rows, path):
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def ensure_dir(path):
    d = os.path.dirname(os.fspath(path))
    if d:
        os.makedirs(d, exist_ok=True)
