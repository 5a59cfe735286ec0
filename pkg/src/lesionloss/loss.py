"""Tversky, cross-entropy, lesion-weighted Tversky and combined losses.

All losses reduce over every voxel of every case in a batch (a batch is
a list of same-purpose grids; a single Mask/Volume pair is a batch of
one).  Per-voxel confusion terms for ground truth p and prediction q:

    TP = p * q        FN = p * (1 - q)        FP = (1 - p) * q

Ratio losses divide global sums of these terms.  The lesion-weighted
variant multiplies the numerator TP sum and the denominator FN sum by
the per-voxel weight map while the denominator TP sum stays unweighted;
that asymmetry is deliberate and preserved as published (a keyword flag
weights both for sensitivity studies).  Its value is a negated ratio in
roughly [-w_max, 0], unlike the "1 - ratio" Tversky form.

Gradients are analytic (quotient rule over the three global sums); the
grad_check harness cross-checks them against central finite differences.
Per-case sums use a fixed-order pairwise tree and cases combine with an
exactly rounded sum, so values are reproducible and case-order free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .components import Connectivity, DEFAULT_CONNECTIVITY, label_components
from .reduction import exact_sum, pairwise_sum
from .volume import Mask, ShapeMismatchError, Volume
from .weighting import WeightCurveParams, WeightMap, build_weight_map

CE_CLAMP_DEFAULT = 1e-7
WLT_SMOOTH_DEFAULT = 1e-6

LOSS_KINDS = ("tversky", "ce", "wlt", "combined")


@dataclass(frozen=True)
class TverskyParams:
    """False-positive weight alpha, false-negative weight beta, smoothing."""

    alpha: float = 0.3
    beta: float = 1.0
    smooth: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ValueError("alpha must be >= 0")
        if not (np.isfinite(self.beta) and self.beta >= 0.0):
            raise ValueError("beta must be >= 0")
        if self.alpha + self.beta <= 0.0:
            raise ValueError("alpha + beta must be positive")
        if not (np.isfinite(self.smooth) and self.smooth > 0.0):
            raise ValueError("smooth must be positive")


def default_wlt_params() -> TverskyParams:
    return TverskyParams(smooth=WLT_SMOOTH_DEFAULT)


@dataclass(frozen=True)
class CombinedParams:
    """Mix of cross-entropy (weight ce_weight) and lesion-weighted Tversky."""

    ce_weight: float = 0.5
    tversky: TverskyParams = TverskyParams(smooth=WLT_SMOOTH_DEFAULT)
    curve: WeightCurveParams = WeightCurveParams()

    def __post_init__(self):
        if not 0.0 <= self.ce_weight <= 1.0:
            raise ValueError("ce_weight must lie in [0, 1]")


@dataclass(frozen=True)
class LossReport:
    value: float
    gradient: Volume | list[Volume] | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("loss value is non-finite")


# ---------------------------------------------------------------------------
# Case normalization: public ops accept one case or a batch list
# ---------------------------------------------------------------------------

def _as_list(x, kind):
    if isinstance(x, kind):
        return [x], True
    items = list(x)
    if not items or not all(isinstance(i, kind) for i in items):
        raise TypeError(f"expected {kind.__name__} or a nonempty sequence of them")
    return items, False


def _case_arrays(gt, pred):
    gts, single = _as_list(gt, Mask)
    preds, _ = _as_list(pred, Volume)
    if len(gts) != len(preds):
        raise ShapeMismatchError("batch lengths differ between gt and pred")
    cases = []
    for g, q in zip(gts, preds):
        if g.shape != q.shape:
            raise ShapeMismatchError(f"grid shapes differ: {g.shape} vs {q.shape}")
        q.require_probability()
        cases.append(
            (
                g.data.ravel(order="F").astype(np.float64),
                q.data.ravel(order="F").astype(np.float64),
            )
        )
    return cases, gts, preds, single


def _omega_arrays(omega, gts):
    maps, _ = _as_list(omega, WeightMap)
    if len(maps) != len(gts):
        raise ShapeMismatchError("batch lengths differ between gt and omega")
    out = []
    for g, w in zip(gts, maps):
        if g.shape != w.shape:
            raise ShapeMismatchError(f"grid shapes differ: {g.shape} vs {w.shape}")
        out.append(w.weights.ravel(order="F"))
    return out


def _wrap(value, grads, preds, single) -> LossReport:
    if grads is None:
        return LossReport(float(value))
    vols = [
        Volume(p.shape, g.reshape(p.shape.dims, order="F").astype(np.float32))
        for p, g in zip(preds, grads)
    ]
    return LossReport(float(value), vols[0] if single else vols)


# ---------------------------------------------------------------------------
# Array-level cores (float64 in, float64 out); also used by the trainer
# ---------------------------------------------------------------------------

def _tversky_core(cases, params: TverskyParams, want_grad: bool):
    a, b, s = params.alpha, params.beta, params.smooth
    tp = exact_sum(pairwise_sum(p * q) for p, q in cases)
    fp = exact_sum(pairwise_sum((1.0 - p) * q) for p, q in cases)
    fn = exact_sum(pairwise_sum(p * (1.0 - q)) for p, q in cases)
    num = s + tp
    den = s + tp + a * fp + b * fn
    value = 1.0 - num / den
    if not want_grad:
        return value, None
    grads = []
    for p, _q in cases:
        dden = p + a * (1.0 - p) - b * p
        grads.append((num * dden - p * den) / (den * den))
    return value, grads


def _ce_core(cases, clamp: float, want_grad: bool):
    n_total = sum(p.size for p, _ in cases)
    lo, hi = clamp, 1.0 - clamp
    total = 0.0
    parts = []
    for p, q in cases:
        c1 = np.clip(q, lo, hi)
        c2 = np.clip(1.0 - q, lo, hi)
        parts.append(pairwise_sum(-(p * np.log(c1) + (1.0 - p) * np.log(c2))))
    total = exact_sum(parts)
    value = total / n_total
    if not want_grad:
        return value, None
    grads = []
    for p, q in cases:
        inside = ((q >= lo) & (q <= hi)).astype(np.float64)
        c1 = np.clip(q, lo, hi)
        c2 = np.clip(1.0 - q, lo, hi)
        grads.append(inside * (-p / c1 + (1.0 - p) / c2) / n_total)
    return value, grads


def _wlt_core(cases, omegas, params: TverskyParams, want_grad: bool,
              weight_tp_denominator: bool):
    a, b, eps = params.alpha, params.beta, params.smooth
    tp_w = exact_sum(pairwise_sum(p * q * w) for (p, q), w in zip(cases, omegas))
    fp = exact_sum(pairwise_sum((1.0 - p) * q) for p, q in cases)
    fn_w = exact_sum(
        pairwise_sum(p * (1.0 - q) * w) for (p, q), w in zip(cases, omegas)
    )
    if weight_tp_denominator:
        tp_den = tp_w
    else:
        tp_den = exact_sum(pairwise_sum(p * q) for p, q in cases)
    num = eps + tp_w
    den = eps + tp_den + a * fp + b * fn_w
    value = -num / den
    if not want_grad:
        return value, None
    grads = []
    for (p, _q), w in zip(cases, omegas):
        dnum = p * w
        dtp_den = p * w if weight_tp_denominator else p
        dden = dtp_den + a * (1.0 - p) - b * p * w
        grads.append((num * dden - dnum * den) / (den * den))
    return value, grads


def _combined_omegas(gts, curve: WeightCurveParams, connectivity: Connectivity):
    maps = [build_weight_map(label_components(g, connectivity), curve) for g in gts]
    return [m.weights.ravel(order="F") for m in maps]


def _combined_core(cases, omegas, params: CombinedParams, clamp: float,
                   want_grad: bool, weight_tp_denominator: bool):
    lam = params.ce_weight
    ce_v, ce_g = _ce_core(cases, clamp, want_grad)
    wlt_v, wlt_g = _wlt_core(cases, omegas, params.tversky, want_grad,
                             weight_tp_denominator)
    value = lam * ce_v + (1.0 - lam) * wlt_v
    if not want_grad:
        return value, None
    grads = [lam * g1 + (1.0 - lam) * g2 for g1, g2 in zip(ce_g, wlt_g)]
    return value, grads


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def confusion_terms(gt: Mask, pred: Volume) -> tuple[Volume, Volume, Volume]:
    """Per-voxel soft (TP, FP, FN) fields for one case."""
    if gt.shape != pred.shape:
        raise ShapeMismatchError(f"grid shapes differ: {gt.shape} vs {pred.shape}")
    pred.require_probability()
    p = gt.data.astype(np.float32)
    q = pred.data
    return (
        Volume(gt.shape, p * q),
        Volume(gt.shape, (1.0 - p) * q),
        Volume(gt.shape, p * (1.0 - q)),
    )


def tversky_loss(gt, pred, params: TverskyParams | None = None,
                 want_grad: bool = False) -> LossReport:
    """1 - (smooth + TP) / (smooth + TP + alpha*FP + beta*FN) over global sums."""
    params = params if params is not None else TverskyParams()
    cases, _gts, preds, single = _case_arrays(gt, pred)
    value, grads = _tversky_core(cases, params, want_grad)
    return _wrap(value, grads, preds, single)


def cross_entropy_loss(gt, pred, want_grad: bool = False,
                       clamp: float = CE_CLAMP_DEFAULT) -> LossReport:
    """Voxel-mean binary cross entropy with probabilities clamped away from 0/1."""
    if not 0.0 < clamp < 0.5:
        raise ValueError("clamp must lie in (0, 0.5)")
    cases, _gts, preds, single = _case_arrays(gt, pred)
    value, grads = _ce_core(cases, clamp, want_grad)
    return _wrap(value, grads, preds, single)


def wlt_loss(gt, pred, omega, params: TverskyParams | None = None,
             want_grad: bool = False,
             weight_tp_denominator: bool = False) -> LossReport:
    """Lesion-weighted Tversky: -(eps + TP.W) / (eps + TP + alpha*FP + beta*FN.W).

    The weight map must come from the ground truth's lesion labeling.
    eps is params.smooth (default 1e-6 here, not the plain-Tversky 1).
    """
    params = params if params is not None else default_wlt_params()
    cases, gts, preds, single = _case_arrays(gt, pred)
    omegas = _omega_arrays(omega, gts)
    value, grads = _wlt_core(cases, omegas, params, want_grad,
                             weight_tp_denominator)
    return _wrap(value, grads, preds, single)


def combined_loss(gt, pred, params: CombinedParams | None = None,
                  want_grad: bool = False,
                  connectivity: Connectivity = DEFAULT_CONNECTIVITY,
                  clamp: float = CE_CLAMP_DEFAULT,
                  weight_tp_denominator: bool = False) -> LossReport:
    """ce_weight * CE + (1 - ce_weight) * WLT, weight maps built internally."""
    params = params if params is not None else CombinedParams()
    cases, gts, preds, single = _case_arrays(gt, pred)
    omegas = _combined_omegas(gts, params.curve, connectivity)
    value, grads = _combined_core(cases, omegas, params, clamp, want_grad,
                                  weight_tp_denominator)
    return _wrap(value, grads, preds, single)


def evaluate_loss(kind: str, gt, pred, *, tversky: TverskyParams | None = None,
                  curve: WeightCurveParams | None = None, ce_weight: float = 0.5,
                  want_grad: bool = False,
                  connectivity: Connectivity = DEFAULT_CONNECTIVITY,
                  clamp: float = CE_CLAMP_DEFAULT,
                  weight_tp_denominator: bool = False,
                  omega=None) -> LossReport:
    """Dispatch a loss by name: tversky | ce | wlt | combined.

    For wlt the weight map is built from the ground-truth labeling unless
    one is passed explicitly.
    """
    if kind == "tversky":
        return tversky_loss(gt, pred, tversky, want_grad)
    if kind == "ce":
        return cross_entropy_loss(gt, pred, want_grad, clamp)
    if kind == "wlt":
        curve = curve if curve is not None else WeightCurveParams()
        if omega is None:
            gts, single = _as_list(gt, Mask)
            maps = [
                build_weight_map(label_components(g, connectivity), curve)
                for g in gts
            ]
            omega = maps[0] if single else maps
        return wlt_loss(gt, pred, omega, tversky, want_grad,
                        weight_tp_denominator)
    if kind == "combined":
        params = CombinedParams(
            ce_weight=ce_weight,
            tversky=tversky if tversky is not None else default_wlt_params(),
            curve=curve if curve is not None else WeightCurveParams(),
        )
        return combined_loss(gt, pred, params, want_grad, connectivity, clamp,
                             weight_tp_denominator)
    raise ValueError(f"unknown loss kind: {kind!r} (choose from {LOSS_KINDS})")


def grad_check(kind: str, gt, pred, step: float = 1e-4, *,
               tversky: TverskyParams | None = None,
               curve: WeightCurveParams | None = None, ce_weight: float = 0.5,
               connectivity: Connectivity = DEFAULT_CONNECTIVITY,
               clamp: float = CE_CLAMP_DEFAULT,
               weight_tp_denominator: bool = False,
               max_voxels: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per voxel is |analytic - fd| / max(1, |analytic|).  Predictions
    must sit far enough inside (0, 1) for the +/- step to stay valid.
    """
    if not (np.isfinite(step) and step > 0.0):
        raise ValueError(f"degenerate step: {step}")
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind: {kind!r} (choose from {LOSS_KINDS})")
    cases, gts, _preds, _single = _case_arrays(gt, pred)
    tversky_p = tversky if tversky is not None else (
        TverskyParams() if kind == "tversky" else default_wlt_params())
    curve_p = curve if curve is not None else WeightCurveParams()
    if kind in ("wlt", "combined"):
        omegas = _combined_omegas(gts, curve_p, connectivity)
    else:
        omegas = None
    combined_p = CombinedParams(ce_weight=ce_weight, tversky=tversky_p,
                                curve=curve_p)

    def value_at(qs):
        c = [(p, q) for (p, _), q in zip(cases, qs)]
        if kind == "tversky":
            return _tversky_core(c, tversky_p, False)[0]
        if kind == "ce":
            return _ce_core(c, clamp, False)[0]
        if kind == "wlt":
            return _wlt_core(c, omegas, tversky_p, False,
                             weight_tp_denominator)[0]
        return _combined_core(c, omegas, combined_p, clamp, False,
                              weight_tp_denominator)[0]

    if kind == "tversky":
        _, grads = _tversky_core(cases, tversky_p, True)
    elif kind == "ce":
        _, grads = _ce_core(cases, clamp, True)
    elif kind == "wlt":
        _, grads = _wlt_core(cases, omegas, tversky_p, True,
                             weight_tp_denominator)
    else:
        _, grads = _combined_core(cases, omegas, combined_p, clamp, True,
                                  weight_tp_denominator)

    qs0 = [q for _, q in cases]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for ci, q0 in enumerate(qs0):
        idx = np.arange(q0.size)
        if max_voxels is not None and q0.size > max_voxels:
            idx = np.sort(rng.choice(q0.size, size=max_voxels, replace=False))
        for j in idx:
            qp = [q.copy() if k == ci else q for k, q in enumerate(qs0)]
            qp[ci][j] = q0[j] + step
            up = value_at(qp)
            qp[ci][j] = q0[j] - step
            down = value_at(qp)
            fd = (up - down) / (2.0 * step)
            a = grads[ci][j]
            err = abs(a - fd) / max(1.0, abs(a))
            if err > worst:
                worst = err
    return worst
