"""Size-adaptive lesion weight curve and per-voxel weight maps.

The weight for a lesion of volume v is

    omega(v) = w_max - (w_max - w_min) / (1 + a_shift * exp(-k * v / vrange))

a falling logistic running from just under w_max at v = 0 toward w_min
as v grows.  With a_shift = exp(k/2) the midpoint (w_max + w_min)/2 sits
at v = vrange/2.  Voxels of a lesion all carry the weight of that
lesion's volume; background voxels carry w_min.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .components import LesionLabeling
from .volume import GridShape, Volume, _freeze

# default curve shift: sqrt(e^7) = e^3.5
DEFAULT_A_SHIFT = math.exp(3.5)


@dataclass(frozen=True)
class WeightCurveParams:
    w_max: float = 10.0
    w_min: float = 1.0
    vrange: float = 350.0
    k: float = 7.0
    a_shift: float = DEFAULT_A_SHIFT

    def __post_init__(self):
        vals = (self.w_max, self.w_min, self.vrange, self.k, self.a_shift)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("curve parameters must be finite")
        if not self.w_max >= self.w_min > 0.0:
            raise ValueError("need w_max >= w_min > 0")
        if self.vrange <= 0.0 or self.k <= 0.0 or self.a_shift <= 0.0:
            raise ValueError("vrange, k and a_shift must be positive")


@dataclass(frozen=True)
class WeightMap:
    """Per-voxel positive weights, float64, indexed [x, y, z]."""

    shape: GridShape
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != self.shape.dims:
            raise ValueError("weights grid does not match shape dims")
        if not np.isfinite(w).all() or (w <= 0.0).any():
            raise ValueError("weights must be positive and finite")
        object.__setattr__(self, "weights", _freeze(w.copy()))


def omega(v: float, params: WeightCurveParams | None = None) -> float:
    """Weight for a lesion of volume v (same units as vrange)."""
    p = params if params is not None else WeightCurveParams()
    v = float(v)
    if not v >= 0.0:
        raise ValueError(f"lesion volume must be >= 0, got {v}")
    return p.w_max - (p.w_max - p.w_min) / (1.0 + p.a_shift * math.exp(-p.k * v / p.vrange))


def build_weight_map(
    labeling: LesionLabeling,
    params: WeightCurveParams | None = None,
    volume_scale: float = 1.0,
) -> WeightMap:
    """Per-voxel weight map: omega of the enclosing lesion's volume.

    volume_scale converts voxel counts before the curve is applied (pass
    the voxel volume in mm^3 for physical units); background stays w_min.
    """
    p = params if params is not None else WeightCurveParams()
    if not volume_scale > 0.0:
        raise ValueError("volume_scale must be positive")
    lut = np.empty(labeling.lesion_count + 1, dtype=np.float64)
    lut[0] = p.w_min
    for i, count in enumerate(labeling.volumes):
        lut[i + 1] = omega(count * volume_scale, p)
    return WeightMap(labeling.shape, lut[labeling.labels])


def weight_map_to_volume(w: WeightMap) -> Volume:
    """Export a weight map as a float32 volume."""
    return Volume(w.shape, w.weights.astype(np.float32))
