"""Synthetic Mondrian-world samples with exact intrinsic ground truth.

Albedo is a Voronoi partition with one random colour per cell, shading is
a smooth grey field (one minus a few Gaussian bumps) and the image is their
product. Sparse judgements are drawn from the true albedo with the same
three-way rule used by WHDR, so the ground truth scores zero.
"""
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .dataio import (Comparison, DecompositionSample, JudgementSet, LABEL_NAMES,
                     load_image, load_judgements, save_image, save_judgements)
from .losses import classify_pairs
from .metrics import point_reflectance


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    region_count: int = 8
    shading_bumps: int = 3
    shading_amplitude: float = 0.6
    judgement_pairs: int = 100
    luminance_margin: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.region_count < 2:
            raise ValueError("region_count must be at least 2")
        if not 0 < self.shading_amplitude < 1:
            raise ValueError("shading_amplitude must lie in (0, 1)")
        if self.shading_bumps < 0 or self.judgement_pairs < 0:
            raise ValueError("counts must be nonnegative")
        if self.luminance_margin < 0:
            raise ValueError("luminance_margin must be nonnegative")

    def to_dict(self):
        return asdict(self)


def sample_rng(seed, index):
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])


def voronoi_labels(size, n, rng):
    centres = rng.uniform(0, size, size=(n, 2))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = (yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2
    return d.argmin(axis=0)


def region_adjacency(labels):
    n = int(labels.max()) + 1
    adj = [set() for _ in range(n)]
    for a, b in ((labels[:, 1:], labels[:, :-1]), (labels[1:], labels[:-1])):
        d = a != b
        for p, q in zip(a[d].tolist(), b[d].tolist()):
            adj[p].add(q)
            adj[q].add(p)
    return adj


def region_colours(labels, n, margin, rng, tries=200):
    """Random colours in [0.1, 0.9]^3 whose channel sums differ by at least
    ``margin`` between touching regions.

    The edge map only sees channel-summed differences, so a boundary
    between two colours of equal sum would be invisible to it.
    """
    adj = region_adjacency(labels)
    colours = np.empty((n, 3))
    for r in range(n):
        best, best_gap = None, -1.0
        for _ in range(tries):
            c = rng.uniform(0.1, 0.9, size=3)
            gaps = [abs(c.sum() - colours[q].sum()) for q in adj[r] if q < r]
            gap = min(gaps) if gaps else np.inf
            if gap > best_gap:
                best, best_gap = c, gap
            if gap >= margin:
                break
        colours[r] = best
    return colours


def smooth_shading(size, bumps, amplitude, rng):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    s = np.ones((size, size))
    for _ in range(bumps):
        cy, cx = rng.uniform(0, size, size=2)
        sigma = rng.uniform(0.15, 0.4) * size
        amp = rng.uniform(0.2, 1.0) * amplitude
        s -= amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
    return np.clip(s, 0.1, 1.0)


def sample_judgements(albedo, n_pairs, rng, delta=0.1):
    _, h, w = albedo.shape
    flat = rng.choice(h * w, size=(n_pairs, 2), replace=True)
    same = flat[:, 0] == flat[:, 1]
    flat[same, 1] = (flat[same, 1] + 1) % (h * w)
    ys, xs = np.divmod(flat, w)
    labels = classify_pairs(point_reflectance(albedo, ys[:, 0], xs[:, 0]),
                            point_reflectance(albedo, ys[:, 1], xs[:, 1]), delta)
    points = {}
    comps = []
    for k in range(n_pairs):
        ids = []
        for j in range(2):
            pid = 2 * k + j
            points[pid] = (xs[k, j] / (w - 1), ys[k, j] / (h - 1))
            ids.append(pid)
        comps.append(Comparison(ids[0], ids[1], LABEL_NAMES[int(labels[k])], 1.0))
    return JudgementSet(points, comps)


def generate_sample(config, index=0):
    """Draw sample ``index`` of the stream defined by ``config.seed``."""
    rng = sample_rng(config.seed, index)
    n = config.image_size
    labels = voronoi_labels(n, config.region_count, rng)
    colours = region_colours(labels, config.region_count, config.luminance_margin, rng)
    albedo = colours[labels].transpose(2, 0, 1).astype(np.float32)
    shade = smooth_shading(n, config.shading_bumps, config.shading_amplitude, rng).astype(np.float32)
    shading = np.broadcast_to(shade, (3, n, n)).copy()
    image = albedo * shading
    judgements = sample_judgements(albedo, config.judgement_pairs, rng)
    return DecompositionSample(image=image, albedo=albedo, shading=shading, judgements=judgements,
                               name=f"sample_{index:05d}", meta={"seed": config.seed, "index": index,
                                                                 "regions": labels})


def generate_dataset(config, count, start=0):
    return [generate_sample(config, start + i) for i in range(count)]


def export_dataset(samples, directory, config=None):
    """Write each sample to its own sub-directory plus ``manifest.json``.

    Layers are 16-bit PNGs; judgements use the IIW JSON schema.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for s in samples:
        sub = os.path.join(directory, s.name)
        os.makedirs(sub, exist_ok=True)
        files = {"input": "input.png"}
        save_image(s.image, os.path.join(sub, "input.png"), 16)
        if s.albedo is not None:
            save_image(s.albedo, os.path.join(sub, "albedo.png"), 16)
            files["albedo"] = "albedo.png"
        if s.shading is not None:
            save_image(s.shading, os.path.join(sub, "shading.png"), 16)
            files["shading"] = "shading.png"
        if s.mask is not None:
            save_image(s.mask, os.path.join(sub, "mask.png"), 8)
            files["mask"] = "mask.png"
        if s.judgements is not None:
            save_judgements(s.judgements, os.path.join(sub, "judgements.json"))
            files["judgements"] = "judgements.json"
        entries.append({"name": s.name, "dir": s.name, "files": files,
                        "seed": s.meta.get("seed"), "index": s.meta.get("index")})
    manifest = {"config": config.to_dict() if config is not None else None, "samples": entries}
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(directory):
    """Load every sample listed in ``manifest.json``."""
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    samples = []
    for e in manifest["samples"]:
        sub = os.path.join(directory, e["dir"])
        f = e["files"]
        opt = lambda key: load_image(os.path.join(sub, f[key])) if key in f else None  # noqa: E731
        mask = opt("mask")
        samples.append(DecompositionSample(
            image=load_image(os.path.join(sub, f["input"])),
            albedo=opt("albedo"),
            shading=opt("shading"),
            mask=None if mask is None else (mask > 0.5).astype(np.float32),
            judgements=load_judgements(os.path.join(sub, f["judgements"])) if "judgements" in f else None,
            name=e["name"],
            meta={"seed": e.get("seed"), "index": e.get("index")},
        ))
    return samples
