"""Loss layers for sparse pairwise judgements and dense ground truth.

Every loss returns a dict of scalar nodes: the named components plus
``"total"``. Totals are assembled with :func:`autodiff.combine`, i.e. in
float64, so the logged components recombine to the logged total exactly.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .dataio import LABEL_CODES
from .nets import edge_map

R_MIN = 1e-4
EQUAL = LABEL_CODES["E"]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.35
    lambda2: float = 0.1
    delta: float = 0.1
    xi: float = 0.05
    joint_scale: float = 2.0

    def __post_init__(self):
        if not self.delta > 0 or self.xi < 0 or self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("need delta > 0 and nonnegative xi and lambdas")

    @classmethod
    def iiw(cls, **kw):
        return cls(**{"lambda1": 0.35, "lambda2": 0.1, **kw})

    @classmethod
    def dense(cls, **kw):
        return cls(**{"lambda1": 0.35, "lambda2": 0.2, **kw})

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------- pair rule


def classify_pairs(r1, r2, delta=0.1):
    """Vectorised three-way rule; returns codes 1, 2 or 0 (equal)."""
    r1 = np.maximum(np.asarray(r1, dtype=np.float64), R_MIN)
    r2 = np.maximum(np.asarray(r2, dtype=np.float64), R_MIN)
    out = np.full(np.broadcast(r1, r2).shape, EQUAL, dtype=np.int8)
    two = r1 / r2 > 1 + delta
    one = r2 / r1 > 1 + delta
    out[two] = 2
    out[one] = 1  # first matching branch wins
    return out


def classify_pair(r1, r2, delta=0.1):
    """Return "1" if the first point is darker, "2" if the second is, else "E"."""
    code = int(classify_pairs(r1, r2, delta))
    return {1: "1", 2: "2", EQUAL: "E"}[code]


def hinge_terms(labels, r1, r2, delta=0.1, xi=0.05):
    """Hinge values and their derivatives w.r.t. r1 and r2.

    label 1:  max(0, 1 + delta + xi - r2/r1)
    label 2:  max(0, 1 + delta + xi - r1/r2)
    equal:    max(0, max(r1/r2, r2/r1) - (1 + delta - xi))

    The subgradient is zero at the kink.
    """
    labels, r1, r2 = np.broadcast_arrays(np.asarray(labels), np.asarray(r1, dtype=np.float64),
                                         np.asarray(r2, dtype=np.float64))
    hi = 1.0 + delta + xi
    lo = 1.0 + delta - xi
    q21 = r2 / r1
    q12 = r1 / r2
    val = np.zeros(labels.shape)
    d1 = np.zeros_like(val)
    d2 = np.zeros_like(val)

    m = (labels == 1) & (hi - q21 > 0)
    val[m] = (hi - q21)[m]
    d1[m] = (q21 / r1)[m]
    d2[m] = (-1.0 / r1)[m]

    m = (labels == 2) & (hi - q12 > 0)
    val[m] = (hi - q12)[m]
    d1[m] = (-1.0 / r2)[m]
    d2[m] = (q12 / r2)[m]

    eq = labels == EQUAL
    first = q12 >= q21
    big = np.where(first, q12, q21)
    m = eq & (big - lo > 0)
    val[m] = (big - lo)[m]
    mf = m & first
    d1[mf] = (1.0 / r2)[mf]
    d2[mf] = (-q12 / r2)[mf]
    ms = m & ~first
    d1[ms] = (-q21 / r1)[ms]
    d2[ms] = (1.0 / r1)[ms]
    return val, d1, d2


def hinge_mu(label, r1, r2, delta=0.1, xi=0.05):
    """Scalar hinge for one judgement; ``label`` is "1", "2" or "E"."""
    code = LABEL_CODES[label] if isinstance(label, str) else int(label)
    r1, r2 = max(float(r1), R_MIN), max(float(r2), R_MIN)
    return float(hinge_terms(np.array([code]), r1, r2, delta, xi)[0][0])


def pairwise_hinge(reflectance, pairs, delta=0.1, xi=0.05):
    """sum_k w_k * mu(J_k, Rbar_k1, Rbar_k2) as a scalar node.

    ``reflectance`` is a C x H x W node; Rbar is its channel mean at the
    pixel pairs ``(y1, x1, y2, x2, labels, weights)``, floored at 1e-4.
    """
    y1, x1, y2, x2, labels, weights = pairs
    tape = reflectance.tape
    if len(labels) == 0:
        return tape.leaf(np.zeros((1, 1, 1)))
    rbar = ad.mean_channels(reflectance) if reflectance.shape[0] > 1 else reflectance
    a = ad.floor(ad.gather_pixels(rbar, y1, x1), R_MIN)
    b = ad.floor(ad.gather_pixels(rbar, y2, x2), R_MIN)
    val, d1, d2 = hinge_terms(labels, a.value[0, 0], b.value[0, 0], delta, xi)
    w = np.asarray(weights, dtype=np.float64)
    out = np.asarray((w * val).sum(), dtype=a.value.dtype).reshape(1, 1, 1)
    dt = a.value.dtype

    def backward(g):
        s = float(g.reshape(()))
        return ((s * w * d1).astype(dt).reshape(a.shape), (s * w * d2).astype(dt).reshape(b.shape))

    return tape.record("pairwise_hinge", (a, b), out, backward)


# ---------------------------------------------------------------- losses


def loss_iiw(r, filtered, guidance, guide_target, pairs, weights):
    """L = L_di + lambda1 * L_g + lambda2 * L_df for judgement supervision.

    ``r`` is the direct-network reflectance (1 x H x W), ``filtered`` the
    domain-filtered albedo, ``guidance`` the predicted edge map and
    ``guide_target`` the guidance image G* (array).
    """
    l_di = pairwise_hinge(r, pairs, weights.delta, weights.xi)
    l_df = pairwise_hinge(filtered, pairs, weights.delta, weights.xi)
    l_g = ad.masked_mse(guidance, edge_map(guide_target))
    total = ad.combine([l_di, l_g, l_df], [1.0, weights.lambda1, weights.lambda2])
    return {"l_di": l_di, "l_g": l_g, "l_df": l_df, "total": total}


def _grad_masks(mask):
    if mask is None:
        return None, None
    m = np.asarray(mask)
    return m[:, :, 1:] * m[:, :, :-1], m[:, 1:, :] * m[:, :-1, :]


def _grad_np(a):
    return a[:, :, 1:] - a[:, :, :-1], a[:, 1:, :] - a[:, :-1, :]


def loss_dense(albedo, shading, filtered, guidance, albedo_gt, shading_gt, mask, weights,
               supervise_shading=True):
    """Dense supervision: value and gradient terms on the direct outputs,
    MSE on the filtered albedo and the guidance target E(R*)."""
    mx, my = _grad_masks(mask)
    agx, agy = _grad_np(albedo_gt)
    value_terms = [ad.masked_mse(albedo, albedo_gt, mask)]
    grad_terms = [ad.masked_mse(ad.diff_x(albedo), agx, mx), ad.masked_mse(ad.diff_y(albedo), agy, my)]
    if supervise_shading and shading is not None:
        sgx, sgy = _grad_np(shading_gt)
        value_terms.append(ad.masked_mse(shading, shading_gt, mask))
        grad_terms += [ad.masked_mse(ad.diff_x(shading), sgx, mx), ad.masked_mse(ad.diff_y(shading), sgy, my)]
    l_di = ad.combine(value_terms + grad_terms,
                      [weights.lambda2] * len(value_terms) + [weights.lambda1] * len(grad_terms))
    l_df = ad.masked_mse(filtered, albedo_gt, mask)
    l_g = ad.masked_mse(guidance, edge_map(albedo_gt), mask)
    total = ad.combine([l_di, l_g, l_df], [1.0, weights.lambda1, weights.lambda2])
    return {"l_di": l_di, "l_g": l_g, "l_df": l_df, "total": total}


def loss_joint(iiw_loss, dense_loss, joint_scale=2.0):
    """joint_scale * iiw + dense on shared-parameter networks."""
    return ad.combine([iiw_loss, dense_loss], [joint_scale, 1.0])
