"""Evaluation metrics: WHDR, (scale-invariant) MSE, LMSE and DSSIM."""
import json
import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import classify_pairs


def point_reflectance(albedo, ys, xs, radius=0):
    """Channel-mean albedo at the given pixels.

    With ``radius > 0`` each value is averaged over the (2r+1)^2
    neighbourhood, clipped at the borders.
    """
    albedo = np.asarray(albedo, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.intp)
    xs = np.asarray(xs, dtype=np.intp)
    if radius == 0:
        return albedo[:, ys, xs].mean(axis=0)
    _, h, w = albedo.shape
    out = np.empty(len(ys))
    for k, (y, x) in enumerate(zip(ys, xs)):
        patch = albedo[:, max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1]
        out[k] = patch.mean()
    return out


def whdr(albedo, judgements, delta=0.1, radius=0):
    """Weighted fraction of judgements the albedo estimate disagrees with.

    Returns 0 for an empty set. A set whose weights sum to zero is also
    scored 0, with a RuntimeWarning.
    """
    if judgements is None or len(judgements) == 0:
        return 0.0
    _, h, w = np.shape(albedo)
    y1, x1, y2, x2, labels, weights = judgements.pixel_arrays(h, w)
    pred = classify_pairs(point_reflectance(albedo, y1, x1, radius),
                          point_reflectance(albedo, y2, x2, radius), delta)
    # correctly rounded sums, so the result does not depend on judgement order
    denom = math.fsum(weights)
    if denom == 0:
        warnings.warn("judgement weights sum to zero; WHDR defined as 0", RuntimeWarning)
        return 0.0
    return math.fsum(weights[pred != labels]) / denom


def _mask_like(mask, shape):
    if mask is None:
        return np.ones(shape)
    return np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)


def mse_scaled(pred, gt, mask=None, scale_invariant=False):
    """Mean squared error over unmasked elements.

    In scale-invariant mode ``pred`` is first multiplied by the least-squares
    optimal alpha = <pred, gt> / <pred, pred> (0 when pred is all zero).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    m = _mask_like(mask, pred.shape)
    n = m.sum()
    if n == 0:
        return 0.0
    if scale_invariant:
        pp = (m * pred * pred).sum()
        alpha = (m * pred * gt).sum() / pp if pp > 0 else 0.0
        pred = alpha * pred
    return float((m * (pred - gt) ** 2).sum() / n)


def lmse(pred, gt, mask=None, window=20, step=10):
    """Local scale-invariant error over half-overlapping windows.

    Each channel is scored as sum_w min_alpha ||alpha pred_w - gt_w||^2 over
    sum_w ||gt_w||^2 and the channel scores are averaged. Returns NaN (with a
    warning) when the ground truth is zero everywhere it is observed.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    c, h, w = pred.shape
    if window > min(h, w):
        raise ValueError(f"window {window} larger than image {h}x{w}")
    m = _mask_like(mask, pred.shape)
    # correctly rounded sums make the result independent of summation order
    scores = []
    for ch in range(c):
        errs, norms = [], []
        for i in range(0, h - window + 1, step):
            for j in range(0, w - window + 1, step):
                mm = m[ch, i:i + window, j:j + window]
                if not mm.any():
                    continue
                p = (mm * pred[ch, i:i + window, j:j + window]).ravel()
                g = (mm * gt[ch, i:i + window, j:j + window]).ravel()
                pp = math.fsum(p * p)
                alpha = math.fsum(p * g) / pp if pp > 0 else 0.0
                errs.append(math.fsum((alpha * p - g) ** 2))
                norms.append(math.fsum(g * g))
        total = math.fsum(norms)
        if total == 0:
            warnings.warn("LMSE undefined for all-zero ground truth", RuntimeWarning)
            return float("nan")
        scores.append(math.fsum(errs) / total)
    return math.fsum(scores) / len(scores)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img, k):
    img = sliding_window_view(img, len(k), axis=0) @ k
    return sliding_window_view(img, len(k), axis=1) @ k


def ssim(pred, gt, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over channels with a Gaussian window (valid region only)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    size = min(window, pred.shape[1], pred.shape[2])
    k = _gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for a, b in zip(pred, gt):
        mu_a = _filter_valid(a, k)
        mu_b = _filter_valid(b, k)
        saa = _filter_valid(a * a, k) - mu_a * mu_a
        sbb = _filter_valid(b * b, k) - mu_b * mu_b
        sab = _filter_valid(a * b, k) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def dssim(pred, gt):
    """(1 - SSIM) / 2, clipped to [0, 1]."""
    return float(min(max((1.0 - ssim(pred, gt)) / 2.0, 0.0), 1.0))


@dataclass
class MetricsReport:
    whdr: float = None
    mse_albedo: float = None
    mse_shading: float = None
    mse_average: float = None
    lmse_albedo: float = None
    lmse_shading: float = None
    lmse_total: float = None
    dssim_albedo: float = None
    dssim_shading: float = None
    dssim_average: float = None

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)


def dense_report(albedo, shading, albedo_gt, shading_gt, mask=None, scale_invariant=False,
                 window=20, step=10, report=None):
    """Fill the dense columns of a MetricsReport."""
    r = report or MetricsReport()
    r.mse_albedo = mse_scaled(albedo, albedo_gt, mask, scale_invariant)
    r.mse_shading = mse_scaled(shading, shading_gt, mask, scale_invariant)
    r.mse_average = (r.mse_albedo + r.mse_shading) / 2
    # small images shrink the window to fit; the stride keeps half overlap then
    win = min(window, albedo.shape[1], albedo.shape[2])
    stride = step if win == window else max(win // 2, 1)
    r.lmse_albedo = lmse(albedo, albedo_gt, mask, win, stride)
    r.lmse_shading = lmse(shading, shading_gt, mask, win, stride)
    r.lmse_total = (r.lmse_albedo + r.lmse_shading) / 2
    r.dssim_albedo = dssim(albedo, albedo_gt)
    r.dssim_shading = dssim(shading, shading_gt)
    r.dssim_average = (r.dssim_albedo + r.dssim_shading) / 2
    return r

