"""Acceptance suite: one test per headline criterion.

Each test records a single PASS/FAIL line (with the measured numbers) that
is printed in the terminal summary. The two end-to-end training runs take
several minutes each and carry the ``slow`` marker.
"""
import math
import time

import numpy as np
import pytest

from intrinsic_decomp import autodiff as ad
from intrinsic_decomp.dataio import Comparison, JudgementSet, iiw_split
from intrinsic_decomp.domain_filter import FilterParams, domain_filter_2d, recursive_pass_1d
from intrinsic_decomp.gradcheck import TOLERANCE, run_suite
from intrinsic_decomp.losses import LossWeights
from intrinsic_decomp.metrics import dssim, lmse, mse_scaled, whdr
from intrinsic_decomp.nets import NetConfig, achromatic_reconstruct, edge_map
from intrinsic_decomp.pipeline import Model, TrainingData, predict, train
from intrinsic_decomp.synth import SynthConfig, generate_dataset, region_adjacency, region_colours, voronoi_labels

# shared end-to-end setup: 200 training samples, a disjoint held-out stream
E2E_TRAIN, E2E_TEST, E2E_STEPS = 200, 40, 2000
DENSE_RUN = dict(lr=1e-3, batch_size=1)
SPARSE_RUN = dict(lr=3e-3, batch_size=4)
SPARSE_PAIRS = 1000


# ------------------------------------------------------------------ 1


def test_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = not failed and elapsed < 120
    report(1, "gradient suite", ok,
           f"{len(results)} checks, worst {worst.name} rel err {worst.max_rel_error:.2e} "
           f"(< {TOLERANCE:g}), {elapsed:.1f}s (< 120s), failed={failed}")
    assert ok


# ------------------------------------------------------------------ 2


def test_achromatic_identity(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        h, w = rng.integers(4, 33, size=2)
        tape = ad.Tape(np.float32)
        image = rng.uniform(0, 1, (3, h, w))
        r = rng.uniform(0.01, 2.0, (1, h, w))
        albedo, shading = achromatic_reconstruct(tape.leaf(r), tape.leaf(image))
        worst = max(worst, float(np.abs(albedo.value * shading.value - image).max()))
    ok = worst <= 1e-6
    report(2, "R' * S reproduces I", ok, f"100 pairs, max |R'S - I| = {worst:.2e} (<= 1e-6)")
    assert ok


# ------------------------------------------------------------------ 3


def test_filter_invariants(report):
    rng = np.random.default_rng(3)
    p = FilterParams()
    img = rng.random((3, 24, 20))
    identity = np.array_equal(recursive_pass_1d(img[0, 0], np.zeros(20)), img[0, 0])
    for reverse in ("forward", "backward"):
        identity &= np.array_equal(recursive_pass_1d(img[1, 3], np.zeros(20), reverse), img[1, 3])
    const = np.full((3, 24, 20), 0.42)
    constant = np.array_equal(domain_filter_2d(const, rng.random((1, 24, 20)), p), const)
    constant &= np.array_equal(recursive_pass_1d(np.full(9, 0.42), rng.random(9)), np.full(9, 0.42))
    contained = True
    for _ in range(20):
        x = rng.random((3, 16, 16))
        out = domain_filter_2d(x, rng.random((1, 16, 16)) * rng.uniform(0, 0.2), p)
        lo, hi = x.min(axis=(1, 2)), x.max(axis=(1, 2))
        contained &= bool(np.all(out.min(axis=(1, 2)) >= lo) and np.all(out.max(axis=(1, 2)) <= hi))
    # Y1 = X1; Y2 = 0.5*0 + 0.5*1; Y3 = 0.5*0 + 0.5*0.5
    hand = recursive_pass_1d([1.0, 0.0, 0.0], [0.9, 0.5, 0.5])
    hand_err = float(np.abs(hand - [1.0, 0.5, 0.25]).max())
    ok = identity and constant and contained and hand_err <= 1e-7
    report(3, "domain-filter invariants", ok,
           f"identity={identity} constant={constant} range={contained} hand example err={hand_err:.1e}")
    assert ok


# ------------------------------------------------------------------ 4


def brute_whdr(albedo, js, delta=0.1):
    """Recompute WHDR judgement by judgement from the definitions."""
    _, h, w = albedo.shape
    wrong, weights = [], []
    for c in js.comparisons:
        refl = []
        for pid in (c.point1, c.point2):
            x, y = js.points[pid]
            col, row = math.floor(x * (w - 1) + 0.5), math.floor(y * (h - 1) + 0.5)
            refl.append(max(sum(float(albedo[k, row, col]) for k in range(albedo.shape[0])) / albedo.shape[0],
                            1e-4))
        if refl[0] / refl[1] > 1 + delta:
            predicted = "2"
        elif refl[1] / refl[0] > 1 + delta:
            predicted = "1"
        else:
            predicted = "E"
        weights.append(c.weight)
        if predicted != c.darker:
            wrong.append(c.weight)
    total = math.fsum(weights)
    return math.fsum(wrong) / total if total > 0 else 0.0


def test_whdr_oracle(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(100):
        h, w = rng.integers(4, 20, size=2)
        albedo = rng.uniform(0.02, 1.0, (3, h, w))
        n = int(rng.integers(1, 51))
        pts = {k: (float(rng.integers(0, w)) / (w - 1), float(rng.integers(0, h)) / (h - 1)) for k in range(2 * n)}
        comps = [Comparison(2 * k, 2 * k + 1, str(rng.choice(["1", "2", "E"])), float(rng.uniform(0.05, 1)))
                 for k in range(n)]
        js = JudgementSet(pts, comps)
        mismatches += whdr(albedo, js) != brute_whdr(albedo, js)
    samples = generate_dataset(SynthConfig(seed=4), 100)
    gt_scores = [whdr(s.albedo, s.judgements) for s in samples]
    ok = mismatches == 0 and max(gt_scores) == 0.0
    report(4, "WHDR oracle", ok, f"{mismatches}/100 mismatches vs brute force; "
                                 f"max ground-truth WHDR over 100 samples = {max(gt_scores)}")
    assert ok


# ------------------------------------------------------------------ 5


def brute_lmse(pred, gt, window=20, step=10):
    """Enumerate every window pixel by pixel with exact sums."""
    scores = []
    for c in range(pred.shape[0]):
        errs, norms = [], []
        for i in range(0, pred.shape[1] - window + 1, step):
            for j in range(0, pred.shape[2] - window + 1, step):
                p = pred[c, i:i + window, j:j + window].ravel().tolist()
                g = gt[c, i:i + window, j:j + window].ravel().tolist()
                pp = math.fsum(a * a for a in p)
                alpha = math.fsum(a * b for a, b in zip(p, g)) / pp if pp > 0 else 0.0
                errs.append(math.fsum((alpha * a - b) * (alpha * a - b) for a, b in zip(p, g)))
                norms.append(math.fsum(b * b for b in g))
        scores.append(math.fsum(errs) / math.fsum(norms))
    return math.fsum(scores) / len(scores)


def test_metric_properties(report):
    rng = np.random.default_rng(5)
    gt = rng.uniform(0.05, 1.0, (3, 48, 40))
    worst_scale = 0.0
    for c in (0.5, 2.0, 10.0):
        worst_scale = max(worst_scale, abs(lmse(c * gt, gt)), abs(mse_scaled(c * gt, gt, scale_invariant=True)))
    self_dssim = abs(dssim(gt, gt))
    exact = 0
    for _ in range(5):
        p, g = rng.random((3, 45, 52)), rng.random((3, 45, 52))
        exact += lmse(p, g) == brute_lmse(p, g)
    ok = worst_scale <= 1e-9 and self_dssim <= 1e-9 and exact == 5
    report(5, "metric properties", ok, f"scale-invariance err {worst_scale:.1e}, dssim(x,x)={self_dssim:.1e}, "
                                       f"lmse == brute force on {exact}/5")
    assert ok


# ------------------------------------------------------------------ 6 & 7


def _e2e_data(pairs=100):
    cfg = SynthConfig(seed=11, judgement_pairs=pairs)
    return generate_dataset(cfg, E2E_TRAIN), generate_dataset(cfg, E2E_TEST, start=E2E_TRAIN)


@pytest.mark.slow
def test_dense_end_to_end(report):
    train_s, test_s = _e2e_data()
    model = Model.create(NetConfig(residual_blocks=4, channels=16, output_mode="dual"), seed=1)
    t0 = time.perf_counter()
    train(model, TrainingData(train_s), "dense", E2E_STEPS, weights=LossWeights.dense(), seed=5, **DENSE_RUN)
    elapsed = time.perf_counter() - t0
    mean_albedo = np.mean([s.albedo.mean(axis=(1, 2)) for s in train_s], axis=0)[:, None, None]
    baseline = np.mean([mse_scaled(np.broadcast_to(mean_albedo, s.albedo.shape), s.albedo) for s in test_s])
    model_mse = np.mean([mse_scaled(predict(model, s.image)["filtered"], s.albedo) for s in test_s])
    ratio = model_mse / baseline
    ok = ratio <= 0.5 and elapsed <= 1800
    report(6, "dense end-to-end", ok, f"held-out albedo MSE {model_mse:.4f} vs constant-mean baseline "
                                      f"{baseline:.4f}, ratio {ratio:.3f} (<= 0.5), {elapsed:.0f}s (<= 1800s)")
    assert ok


def _held_out_whdr(model, samples):
    outs = [predict(model, s.image) for s in samples]
    filtered = np.mean([whdr(o["filtered"], s.judgements) for o, s in zip(outs, samples)])
    raw = np.mean([whdr(o["albedo"], s.judgements) for o, s in zip(outs, samples)])
    return filtered, raw


@pytest.mark.slow
def test_sparse_end_to_end(report):
    train_s, test_s = _e2e_data(SPARSE_PAIRS)
    model = Model.create(NetConfig(residual_blocks=4, channels=16, output_mode="scalar"), seed=1)
    start, _ = _held_out_whdr(model, test_s)
    t0 = time.perf_counter()
    train(model, TrainingData(train_s), "iiw", E2E_STEPS, weights=LossWeights.iiw(), seed=5, **SPARSE_RUN)
    elapsed = time.perf_counter() - t0
    filtered, raw = _held_out_whdr(model, test_s)
    ok = start >= 0.30 and filtered <= 0.15 and filtered <= raw + 0.01
    report(7, "sparse end-to-end", ok, f"held-out WHDR {filtered:.4f} (<= 0.15), untrained {start:.4f} (>= 0.30), "
                                       f"unfiltered {raw:.4f} (filtered <= unfiltered + 0.01), {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 8


def test_joint_total(report):
    data = TrainingData(generate_dataset(SynthConfig(image_size=32, region_count=5, judgement_pairs=60, seed=8), 6))
    worst, steps = 0.0, 0
    for batch in (1, 2):
        model = Model.create(NetConfig(residual_blocks=4, channels=16), seed=batch)
        rows = []
        train(model, data, "joint", 15, weights=LossWeights(joint_scale=2.0), seed=batch, log_rows=rows,
              batch_size=batch, lr=3e-3)
        steps += len(rows)
        worst = max(worst, max(abs(r["total"] - (2 * r["iiw"] + r["dense"])) for r in rows))
    ok = worst <= 1e-6
    report(8, "joint total = 2*iiw + dense", ok, f"{steps} logged steps, max deviation {worst:.1e} (<= 1e-6)")
    assert ok


# ------------------------------------------------------------------ 9


def mondrian_fixture(seed, size=128, regions=4, noise=0.05):
    rng = np.random.default_rng(seed)
    labels = voronoi_labels(size, regions, rng)
    albedo = region_colours(labels, regions, 0.3, rng)[labels].transpose(2, 0, 1)
    noisy = albedo + rng.normal(0, noise, albedo.shape)
    return labels, albedo, noisy


def flattening_scores(labels, albedo, noisy, out):
    """(within-region variance reduction, cross-edge contrast retention)."""
    regions = np.unique(labels)

    def within(x):
        return np.mean([x[:, labels == r].var(axis=1).mean() for r in regions])

    reduction = 1 - within(out) / within(noisy)
    before, after = [], []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1], labels[1:])):
        ys, xs = np.nonzero(a != b)
        dy, dx = (0, 1) if a.shape[1] < labels.shape[1] else (1, 0)
        before.append(np.abs(albedo[:, ys, xs] - albedo[:, ys + dy, xs + dx]).sum(axis=0))
        after.append(np.abs(out[:, ys, xs] - out[:, ys + dy, xs + dx]).sum(axis=0))
    retention = np.concatenate(after).mean() / np.concatenate(before).mean()
    return reduction, retention


def test_flattening(report):
    scores = []
    for seed in range(5):
        labels, albedo, noisy = mondrian_fixture(seed)
        assert all(region_adjacency(labels))
        out = domain_filter_2d(noisy, edge_map(albedo), FilterParams(sigma_r=0.1))
        scores.append(flattening_scores(labels, albedo, noisy, out))
    red = min(s[0] for s in scores)
    ret = min(s[1] for s in scores)
    ok = red >= 0.90 and ret >= 0.80
    report(9, "flattening", ok, f"5 fixtures, worst variance reduction {red:.1%} (>= 90%), "
                                f"worst contrast retention {ret:.1%} (>= 80%)")
    assert ok


# ------------------------------------------------------------------ 10


def test_split_rule(report):
    train_ids, test_ids = iiw_split(list(range(1, 101)))
    expected = list(range(1, 101, 5))
    ok = test_ids == expected and len(test_ids) == 20 and sorted(train_ids + test_ids) == list(range(1, 101))
    report(10, "split rule", ok, f"test ids {test_ids[:3]}...{test_ids[-1]} ({len(test_ids)} ids)")
    assert ok
